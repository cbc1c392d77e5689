#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stabilitybench/rng.hpp"

namespace sb {

enum class TaskKind { Quadratic, Logistic, MlpClassify, BanditPolicy };

std::string task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

// Data-generating process parameters. Only the fields relevant to the task
// kind are consulted.
struct DataSpec {
    int dim = 10;               // input dimension (supervised)
    int classes = 4;            // mlp-classify
    int hidden = 16;            // mlp-classify hidden width
    double label_noise = 0.0;   // label flip probability / quadratic target spread
    double eig_min = 0.5;       // quadratic curvature spectrum (linspace)
    double eig_max = 5.0;
    std::vector<double> eigs;   // explicit spectrum overrides eig_min/eig_max
    double class_sep = 2.0;     // mlp-classify class-mean scale
    int arms = 5;               // bandit
    std::vector<double> arm_means;  // explicit arm means; default linspace 1..0
    double reward_noise = 0.1;      // bandit per-pull reward sd
};

struct EvalSpec {
    int samples = 256;  // one evaluation batch of this many fresh draws
};

struct Task {
    TaskKind kind = TaskKind::Quadratic;
    DataSpec data;
    EvalSpec eval;
    std::uint64_t seed = 0;  // task-identity seed (fixed landscape: spectrum, w*, means)
    int batch_size = 32;
    int subbatches = 8;  // K gradient sub-batches per step; >= 2

    // Landscape accessors (pure functions of data + seed).
    std::vector<double> quadratic_eigs() const;
    std::vector<double> logistic_weights() const;    // w*
    std::vector<double> mlp_class_means() const;     // classes x dim, row-major
    std::vector<double> bandit_means() const;
    int param_count() const;
    std::vector<std::size_t> param_blocks() const;
};

// One draw from the step-t data distribution. Sub-batch splits partition the
// batch and feed gradient-coherence probing.
struct Batch {
    int n = 0;
    int dim = 0;
    std::vector<double> inputs;    // n x dim row-major (quadratic: target offsets)
    std::vector<double> targets;   // labels as doubles (classify), soft labels (logistic)
    std::vector<double> target_dist;  // n x classes soft targets; filled by label smoothing
    // Bandit raw variates; actions are derived from the policy inside the step.
    std::vector<double> action_u;      // n uniforms in [0,1)
    std::vector<double> reward_eps;    // n standard normals
    std::vector<double> reward_offset; // n additive reward shifts (signal seam)
    std::vector<double> logit_noise;   // arms-sized sampling-logit shift (data seam)
    std::vector<std::pair<int, int>> splits;  // (start, len) per sub-batch
};

// Pure function of (task, run_seed, step): replaying a step regenerates the
// identical batch.
Batch make_batch(const Task& task, std::uint64_t run_seed, std::uint64_t step);

// Fresh evaluation draw, pure function of (task, eval_seed).
Batch make_eval_batch(const Task& task, std::uint64_t eval_seed);

}  // namespace sb
