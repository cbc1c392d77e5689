#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "stabilitybench/rng.hpp"
#include "stabilitybench/task.hpp"

namespace sb {

enum class OptKind { Sgd, Momentum, Adam };

std::string opt_kind_name(OptKind k);
OptKind opt_kind_from_name(const std::string& name);

struct LearnerConfig {
    OptKind opt = OptKind::Sgd;
    double lr = 0.01;
    double momentum_beta = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double clip_norm = 0.0;     // global-norm gradient clip; 0 disables
    double entropy_coef = 0.0;  // policy learner only
};

struct OptStateVectors {
    std::vector<double> m;  // first moment / velocity
    std::vector<double> v;  // second moment (Adam)
};

// The full dynamical state: parameters plus optimizer auxiliaries, step
// counter, learning rates, and the learner-owned RNG stream.
struct LearnerState {
    TaskKind task_kind = TaskKind::Quadratic;
    LearnerConfig config;
    std::vector<double> params;
    std::vector<std::size_t> blocks;  // parameter block lengths; sum == params.size()
    OptStateVectors opt_state;
    std::uint64_t step_index = 0;
    double lr = 0.0;        // effective rate for the next update
    double base_lr = 0.0;   // unspiked rate; restored after transient windows
    double entropy_coef = 0.0;
    bool diverged = false;
    Rng rng;

    bool operator==(const LearnerState& other) const;
};

// Raw per-step signals consumed by the telemetry layer. Gradients are the
// unhooked analytic values; the update itself may differ when hooks fire.
struct StepRaw {
    std::uint64_t step = 0;  // step index before the update
    std::vector<std::vector<double>> sub_grads;
    std::vector<double> grad;  // sample-weighted mean of sub_grads
    double loss = 0.0;
    double update_norm = 0.0;
    double entropy = std::numeric_limits<double>::quiet_NaN();  // policy only
    bool diverged = false;
};

// Seams for the perturbation engine. grad applies to the aggregated gradient
// copy that drives the update; params applies immediately before the update.
// Hooks must be pure in their inputs plus any RNG bound inside the closure.
struct StepHooks {
    std::function<void(std::vector<double>&)> grad;
    std::function<void(std::vector<double>&)> params;
};

// Performance returned for a diverged state; the runner substitutes the
// context-aware floor (pre-perturbation mean - 1e6) in telemetry.
inline constexpr double kDivergedPerformance = -1.0e6;

// Per-block init half-widths: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for
// supervised learners, zero logits for the policy learner.
std::vector<double> block_init_halfwidths(const Task& task);

LearnerState init_learner(const Task& task, const LearnerConfig& config, std::uint64_t seed);

// One application of the transition operator. Mutates state in place and
// returns the raw step signals. A non-finite loss or gradient flags the state
// diverged instead of raising; calling on an already-diverged state raises.
StepRaw train_step(LearnerState& state, const Task& task, const Batch& batch,
                   const StepHooks& hooks = {});

// Performance signal: negative mean loss on a fresh seeded evaluation sample,
// or the exact expected reward for the policy learner.
double evaluate(const LearnerState& state, const Task& task, std::uint64_t eval_seed);

// Loss (and analytic gradient, if grad_out != nullptr) of the given parameter
// vector on a fixed batch. This is the differentiable objective that
// train_step's gradients realize; exposed for finite-difference checking.
double batch_loss(const Task& task, const LearnerState& state, const std::vector<double>& params,
                  const Batch& batch, std::vector<double>* grad_out);

std::vector<double> softmax(const std::vector<double>& logits);
double softmax_entropy(const std::vector<double>& probs);

}  // namespace sb
