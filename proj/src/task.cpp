#include "stabilitybench/task.hpp"

#include <cmath>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/vecmath.hpp"

namespace sb {

std::string task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::Quadratic: return "quadratic";
        case TaskKind::Logistic: return "logistic";
        case TaskKind::MlpClassify: return "mlp-classify";
        case TaskKind::BanditPolicy: return "bandit-policy";
    }
    return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "quadratic") return TaskKind::Quadratic;
    if (name == "logistic") return TaskKind::Logistic;
    if (name == "mlp-classify") return TaskKind::MlpClassify;
    if (name == "bandit-policy") return TaskKind::BanditPolicy;
    throw ConfigError("unknown task kind: '" + name + "'");
}

std::vector<double> Task::quadratic_eigs() const {
    std::vector<double> eigs = data.eigs.empty()
        ? linspace(data.eig_min, data.eig_max, static_cast<std::size_t>(data.dim))
        : data.eigs;
    if (eigs.size() != static_cast<std::size_t>(data.dim))
        throw ConfigError("quadratic spectrum length does not match dim");
    for (double e : eigs)
        if (e <= 0.0) throw ConfigError("quadratic curvature eigenvalues must be positive");
    return eigs;
}

std::vector<double> Task::logistic_weights() const {
    Rng rng = Rng::from_stream(seed, "task/logistic-w");
    std::vector<double> w(static_cast<std::size_t>(data.dim));
    const double sd = 2.0 / std::sqrt(static_cast<double>(data.dim));
    for (double& x : w) x = rng.normal(0.0, sd);
    return w;
}

std::vector<double> Task::mlp_class_means() const {
    Rng rng = Rng::from_stream(seed, "task/mlp-means");
    std::vector<double> m(static_cast<std::size_t>(data.classes) * data.dim);
    for (double& x : m) x = rng.normal(0.0, 1.0) * data.class_sep / std::sqrt(static_cast<double>(data.dim));
    return m;
}

std::vector<double> Task::bandit_means() const {
    if (!data.arm_means.empty()) {
        if (data.arm_means.size() != static_cast<std::size_t>(data.arms))
            throw ConfigError("arm_means length does not match arms");
        return data.arm_means;
    }
    return linspace(1.0, 0.0, static_cast<std::size_t>(data.arms));
}

int Task::param_count() const {
    switch (kind) {
        case TaskKind::Quadratic:
        case TaskKind::Logistic:
            return data.dim;
        case TaskKind::MlpClassify:
            return data.hidden * data.dim + data.hidden + data.classes * data.hidden + data.classes;
        case TaskKind::BanditPolicy:
            return data.arms;
    }
    return 0;
}

std::vector<std::size_t> Task::param_blocks() const {
    switch (kind) {
        case TaskKind::Quadratic:
        case TaskKind::Logistic:
            return {static_cast<std::size_t>(data.dim)};
        case TaskKind::MlpClassify:
            return {static_cast<std::size_t>(data.hidden) * data.dim,
                    static_cast<std::size_t>(data.hidden),
                    static_cast<std::size_t>(data.classes) * data.hidden,
                    static_cast<std::size_t>(data.classes)};
        case TaskKind::BanditPolicy:
            return {static_cast<std::size_t>(data.arms)};
    }
    return {};
}

namespace {

std::vector<std::pair<int, int>> make_splits(int n, int k) {
    if (k < 2) throw ContractError("sub-batch count must be >= 2");
    if (n < k) throw ContractError("batch too small for " + std::to_string(k) + " sub-batches");
    std::vector<std::pair<int, int>> splits;
    splits.reserve(static_cast<std::size_t>(k));
    const int base = n / k;
    const int extra = n % k;
    int start = 0;
    for (int i = 0; i < k; ++i) {
        const int len = base + (i < extra ? 1 : 0);
        splits.emplace_back(start, len);
        start += len;
    }
    return splits;
}

void fill_supervised(const Task& task, Batch& b, Rng& rng) {
    const int n = b.n;
    const int d = b.dim;
    b.inputs.resize(static_cast<std::size_t>(n) * d);

    switch (task.kind) {
        case TaskKind::Quadratic: {
            // Samples are target offsets: per-sample loss is a quadratic bowl
            // centered at the offset, so zero label noise gives the exact
            // deterministic gradient H * theta.
            for (double& x : b.inputs) x = task.data.label_noise * rng.normal();
            break;
        }
        case TaskKind::Logistic: {
            const std::vector<double> w = task.logistic_weights();
            b.targets.resize(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                double s = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double x = rng.normal();
                    b.inputs[static_cast<std::size_t>(i) * d + j] = x;
                    s += x * w[static_cast<std::size_t>(j)];
                }
                double y = s > 0.0 ? 1.0 : 0.0;
                if (task.data.label_noise > 0.0 && rng.uniform() < task.data.label_noise)
                    y = 1.0 - y;
                b.targets[static_cast<std::size_t>(i)] = y;
            }
            break;
        }
        case TaskKind::MlpClassify: {
            const std::vector<double> means = task.mlp_class_means();
            b.targets.resize(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.data.classes)));
                for (int j = 0; j < d; ++j)
                    b.inputs[static_cast<std::size_t>(i) * d + j] =
                        means[static_cast<std::size_t>(c) * d + j] + rng.normal();
                if (task.data.label_noise > 0.0 && rng.uniform() < task.data.label_noise)
                    c = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.data.classes)));
                b.targets[static_cast<std::size_t>(i)] = static_cast<double>(c);
            }
            break;
        }
        case TaskKind::BanditPolicy:
            break;  // handled by caller
    }
}

Batch make_batch_impl(const Task& task, Rng rng, int n) {
    Batch b;
    b.n = n;
    if (task.kind == TaskKind::BanditPolicy) {
        b.dim = task.data.arms;
        b.action_u.resize(static_cast<std::size_t>(n));
        b.reward_eps.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            b.action_u[static_cast<std::size_t>(i)] = rng.uniform();
            b.reward_eps[static_cast<std::size_t>(i)] = rng.normal();
        }
    } else {
        b.dim = task.data.dim;
        fill_supervised(task, b, rng);
    }
    b.splits = make_splits(n, task.subbatches);
    return b;
}

}  // namespace

Batch make_batch(const Task& task, std::uint64_t run_seed, std::uint64_t step) {
    Rng rng = Rng::from_stream(mix_seed(task.seed, "task-data", run_seed), "step", step);
    return make_batch_impl(task, rng, task.batch_size);
}

Batch make_eval_batch(const Task& task, std::uint64_t eval_seed) {
    Rng rng = Rng::from_stream(mix_seed(task.seed, "task-eval", eval_seed), "eval");
    Batch b;
    const int n = task.eval.samples;
    b.n = n;
    if (task.kind == TaskKind::BanditPolicy) {
        // Bandit evaluation is exact (expected reward under the policy);
        // no draws are needed.
        b.dim = task.data.arms;
        return b;
    }
    b.dim = task.data.dim;
    fill_supervised(task, b, rng);
    return b;
}

}  // namespace sb
