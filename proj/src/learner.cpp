#include "stabilitybench/learner.hpp"

#include <cmath>
#include <cstring>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/vecmath.hpp"

namespace sb {

std::string opt_kind_name(OptKind k) {
    switch (k) {
        case OptKind::Sgd: return "sgd";
        case OptKind::Momentum: return "momentum";
        case OptKind::Adam: return "adam";
    }
    return "?";
}

OptKind opt_kind_from_name(const std::string& name) {
    if (name == "sgd") return OptKind::Sgd;
    if (name == "momentum") return OptKind::Momentum;
    if (name == "adam") return OptKind::Adam;
    throw ConfigError("unknown optimizer kind: '" + name + "'");
}

namespace {

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return false;
    return a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

bool LearnerState::operator==(const LearnerState& other) const {
    return task_kind == other.task_kind && config.opt == other.config.opt &&
           config.lr == other.config.lr && config.momentum_beta == other.config.momentum_beta &&
           config.adam_beta1 == other.config.adam_beta1 &&
           config.adam_beta2 == other.config.adam_beta2 &&
           config.adam_eps == other.config.adam_eps && config.clip_norm == other.config.clip_norm &&
           config.entropy_coef == other.config.entropy_coef && bits_equal(params, other.params) &&
           blocks == other.blocks && bits_equal(opt_state.m, other.opt_state.m) &&
           bits_equal(opt_state.v, other.opt_state.v) && step_index == other.step_index &&
           lr == other.lr && base_lr == other.base_lr && entropy_coef == other.entropy_coef &&
           diverged == other.diverged && rng.state() == other.rng.state();
}

std::vector<double> block_init_halfwidths(const Task& task) {
    switch (task.kind) {
        case TaskKind::Quadratic:
        case TaskKind::Logistic:
            return {1.0 / std::sqrt(static_cast<double>(task.data.dim))};
        case TaskKind::MlpClassify: {
            const double w1 = 1.0 / std::sqrt(static_cast<double>(task.data.dim));
            const double w2 = 1.0 / std::sqrt(static_cast<double>(task.data.hidden));
            return {w1, w1, w2, w2};
        }
        case TaskKind::BanditPolicy:
            return {0.0};  // logits start at zero: the uniform policy
    }
    return {};
}

LearnerState init_learner(const Task& task, const LearnerConfig& config, std::uint64_t seed) {
    if (config.lr <= 0.0) throw ConfigError("learner lr must be positive");
    if (config.entropy_coef < 0.0) throw ConfigError("entropy_coef must be nonnegative");
    if (config.entropy_coef > 0.0 && task.kind != TaskKind::BanditPolicy)
        throw ConfigError("entropy_coef is only valid for bandit-policy, got task '" +
                          task_kind_name(task.kind) + "' with optimizer '" +
                          opt_kind_name(config.opt) + "'");
    if (task.kind == TaskKind::Quadratic) task.quadratic_eigs();  // validates spectrum

    LearnerState s;
    s.task_kind = task.kind;
    s.config = config;
    s.blocks = task.param_blocks();
    s.params.resize(static_cast<std::size_t>(task.param_count()));
    s.rng = Rng::from_stream(seed, "learner-init");

    const std::vector<double> halfwidths = block_init_halfwidths(task);
    std::size_t offset = 0;
    for (std::size_t b = 0; b < s.blocks.size(); ++b) {
        const double hw = halfwidths[b];
        for (std::size_t i = 0; i < s.blocks[b]; ++i)
            s.params[offset + i] = hw == 0.0 ? 0.0 : s.rng.uniform(-hw, hw);
        offset += s.blocks[b];
    }

    const std::size_t n = s.params.size();
    if (config.opt == OptKind::Momentum) {
        s.opt_state.m.assign(n, 0.0);
    } else if (config.opt == OptKind::Adam) {
        s.opt_state.m.assign(n, 0.0);
        s.opt_state.v.assign(n, 0.0);
    }

    s.lr = s.base_lr = config.lr;
    s.entropy_coef = config.entropy_coef;
    return s;
}

std::vector<double> softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double z : logits) mx = std::max(mx, z);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (double& x : p) x /= sum;
    return p;
}

double softmax_entropy(const std::vector<double>& probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

namespace {

// ---------------------------------------------------------------------------
// Per-kind losses and analytic gradients over a sample range.

double quadratic_range(const Task& task, const std::vector<double>& params, const Batch& batch,
                       int start, int len, std::vector<double>* grad) {
    const std::vector<double> eigs = task.quadratic_eigs();
    const int d = batch.dim;
    double loss = 0.0;
    if (grad) grad->assign(params.size(), 0.0);
    for (int i = start; i < start + len; ++i) {
        const double* x = batch.inputs.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            const double r = params[static_cast<std::size_t>(j)] - x[j];
            loss += 0.5 * eigs[static_cast<std::size_t>(j)] * r * r;
            if (grad) (*grad)[static_cast<std::size_t>(j)] += eigs[static_cast<std::size_t>(j)] * r;
        }
    }
    const double inv = 1.0 / static_cast<double>(len);
    if (grad) scale(*grad, inv);
    return loss * inv;
}

double logistic_range(const Task& task, const std::vector<double>& params, const Batch& batch,
                      int start, int len, std::vector<double>* grad) {
    (void)task;
    const int d = batch.dim;
    double loss = 0.0;
    if (grad) grad->assign(params.size(), 0.0);
    for (int i = start; i < start + len; ++i) {
        const double* x = batch.inputs.data() + static_cast<std::size_t>(i) * d;
        const double y = batch.targets[static_cast<std::size_t>(i)];
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += params[static_cast<std::size_t>(j)] * x[j];
        // Stable binary cross-entropy supporting soft labels.
        loss += std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::abs(s)));
        if (grad) {
            const double p = 1.0 / (1.0 + std::exp(-s));
            const double coef = p - y;
            for (int j = 0; j < d; ++j) (*grad)[static_cast<std::size_t>(j)] += coef * x[j];
        }
    }
    const double inv = 1.0 / static_cast<double>(len);
    if (grad) scale(*grad, inv);
    return loss * inv;
}

double mlp_range(const Task& task, const std::vector<double>& params, const Batch& batch,
                 int start, int len, std::vector<double>* grad) {
    const int d = task.data.dim;
    const int h = task.data.hidden;
    const int c = task.data.classes;
    const std::size_t w1_off = 0;
    const std::size_t b1_off = w1_off + static_cast<std::size_t>(h) * d;
    const std::size_t w2_off = b1_off + static_cast<std::size_t>(h);
    const std::size_t b2_off = w2_off + static_cast<std::size_t>(c) * h;

    double loss = 0.0;
    if (grad) grad->assign(params.size(), 0.0);
    std::vector<double> act(static_cast<std::size_t>(h));
    std::vector<double> logits(static_cast<std::size_t>(c));
    std::vector<double> dlogits(static_cast<std::size_t>(c));

    for (int i = start; i < start + len; ++i) {
        const double* x = batch.inputs.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < h; ++j) {
            double z = params[b1_off + static_cast<std::size_t>(j)];
            const double* row = params.data() + w1_off + static_cast<std::size_t>(j) * d;
            for (int kk = 0; kk < d; ++kk) z += row[kk] * x[kk];
            act[static_cast<std::size_t>(j)] = std::tanh(z);
        }
        for (int j = 0; j < c; ++j) {
            double z = params[b2_off + static_cast<std::size_t>(j)];
            const double* row = params.data() + w2_off + static_cast<std::size_t>(j) * h;
            for (int kk = 0; kk < h; ++kk) z += row[kk] * act[static_cast<std::size_t>(kk)];
            logits[static_cast<std::size_t>(j)] = z;
        }
        double mx = logits[0];
        for (double z : logits) mx = std::max(mx, z);
        double lse = 0.0;
        for (double z : logits) lse += std::exp(z - mx);
        lse = mx + std::log(lse);

        const bool soft = !batch.target_dist.empty();
        const double* q = soft ? batch.target_dist.data() + static_cast<std::size_t>(i) * c : nullptr;
        const int label = soft ? -1 : static_cast<int>(batch.targets[static_cast<std::size_t>(i)]);
        for (int j = 0; j < c; ++j) {
            const double qj = soft ? q[j] : (j == label ? 1.0 : 0.0);
            const double logp = logits[static_cast<std::size_t>(j)] - lse;
            loss -= qj * logp;
            dlogits[static_cast<std::size_t>(j)] = std::exp(logp) - qj;
        }
        if (!grad) continue;
        for (int j = 0; j < c; ++j) {
            const double dz = dlogits[static_cast<std::size_t>(j)];
            (*grad)[b2_off + static_cast<std::size_t>(j)] += dz;
            double* wrow = grad->data() + w2_off + static_cast<std::size_t>(j) * h;
            for (int kk = 0; kk < h; ++kk) wrow[kk] += dz * act[static_cast<std::size_t>(kk)];
        }
        for (int j = 0; j < h; ++j) {
            double da = 0.0;
            for (int kk = 0; kk < c; ++kk)
                da += params[w2_off + static_cast<std::size_t>(kk) * h + j] *
                      dlogits[static_cast<std::size_t>(kk)];
            const double a = act[static_cast<std::size_t>(j)];
            const double dz = da * (1.0 - a * a);
            (*grad)[b1_off + static_cast<std::size_t>(j)] += dz;
            double* wrow = grad->data() + w1_off + static_cast<std::size_t>(j) * d;
            for (int kk = 0; kk < d; ++kk) wrow[kk] += dz * x[kk];
        }
    }
    const double inv = 1.0 / static_cast<double>(len);
    if (grad) scale(*grad, inv);
    return loss * inv;
}

struct BanditResolved {
    std::vector<int> actions;
    std::vector<double> rewards;
    double baseline = 0.0;
};

// Actions come from the sampling policy (current logits plus any injected
// sampling noise) via inverse CDF on the batch's uniforms; rewards add the
// per-pull noise variates and any signal offsets. Frozen thereafter.
BanditResolved resolve_bandit(const Task& task, const std::vector<double>& sampling_logits,
                              const Batch& batch) {
    std::vector<double> logits = sampling_logits;
    if (!batch.logit_noise.empty()) {
        if (batch.logit_noise.size() != logits.size())
            throw ContractError("logit_noise length mismatch");
        for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += batch.logit_noise[i];
    }
    const std::vector<double> probs = softmax(logits);
    const std::vector<double> means = task.bandit_means();

    BanditResolved r;
    r.actions.resize(static_cast<std::size_t>(batch.n));
    r.rewards.resize(static_cast<std::size_t>(batch.n));
    double sum = 0.0;
    for (int i = 0; i < batch.n; ++i) {
        const double u = batch.action_u[static_cast<std::size_t>(i)];
        double cum = 0.0;
        int a = static_cast<int>(probs.size()) - 1;
        for (std::size_t j = 0; j < probs.size(); ++j) {
            cum += probs[j];
            if (u < cum) {
                a = static_cast<int>(j);
                break;
            }
        }
        double reward = means[static_cast<std::size_t>(a)] +
                        task.data.reward_noise * batch.reward_eps[static_cast<std::size_t>(i)];
        if (!batch.reward_offset.empty()) reward += batch.reward_offset[static_cast<std::size_t>(i)];
        r.actions[static_cast<std::size_t>(i)] = a;
        r.rewards[static_cast<std::size_t>(i)] = reward;
        sum += reward;
    }
    r.baseline = sum / static_cast<double>(batch.n);
    return r;
}

// Score-function surrogate with frozen actions, rewards, and baseline:
//   L = -(1/len) sum (r_i - b) log pi(a_i) - c H(pi).
// Its analytic gradient is the policy-gradient update; the entropy term
// repeats in every sub-range so sub-gradient means match the full gradient.
double bandit_range(const std::vector<double>& params, const BanditResolved& res,
                    double entropy_coef, int start, int len, std::vector<double>* grad) {
    const std::size_t k = params.size();
    double mx = params[0];
    for (double z : params) mx = std::max(mx, z);
    double lse = 0.0;
    for (double z : params) lse += std::exp(z - mx);
    lse = mx + std::log(lse);
    std::vector<double> probs(k), logp(k);
    for (std::size_t j = 0; j < k; ++j) {
        logp[j] = params[j] - lse;
        probs[j] = std::exp(logp[j]);
    }
    const double entropy = softmax_entropy(probs);

    double loss = 0.0;
    if (grad) grad->assign(k, 0.0);
    for (int i = start; i < start + len; ++i) {
        const double adv = res.rewards[static_cast<std::size_t>(i)] - res.baseline;
        const int a = res.actions[static_cast<std::size_t>(i)];
        loss -= adv * logp[static_cast<std::size_t>(a)];
        if (grad) {
            for (std::size_t j = 0; j < k; ++j) (*grad)[j] += adv * probs[j];
            (*grad)[static_cast<std::size_t>(a)] -= adv;
        }
    }
    const double inv = 1.0 / static_cast<double>(len);
    loss *= inv;
    loss -= entropy_coef * entropy;
    if (grad) {
        scale(*grad, inv);
        if (entropy_coef != 0.0)
            for (std::size_t j = 0; j < k; ++j)
                if (probs[j] > 0.0) (*grad)[j] += entropy_coef * probs[j] * (std::log(probs[j]) + entropy);
    }
    return loss;
}

double range_loss(const Task& task, const LearnerState& state, const std::vector<double>& params,
                  const Batch& batch, const BanditResolved* resolved, int start, int len,
                  std::vector<double>* grad) {
    switch (task.kind) {
        case TaskKind::Quadratic: return quadratic_range(task, params, batch, start, len, grad);
        case TaskKind::Logistic: return logistic_range(task, params, batch, start, len, grad);
        case TaskKind::MlpClassify: return mlp_range(task, params, batch, start, len, grad);
        case TaskKind::BanditPolicy:
            return bandit_range(params, *resolved, state.entropy_coef, start, len, grad);
    }
    throw ContractError("unreachable task kind");
}

// Optimizer update; returns the update-vector norm.
double apply_update(LearnerState& s, const std::vector<double>& g) {
    double nn = 0.0;
    const LearnerConfig& c = s.config;
    switch (c.opt) {
        case OptKind::Sgd: {
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double d = -s.lr * g[i];
                s.params[i] += d;
                nn += d * d;
            }
            break;
        }
        case OptKind::Momentum: {
            for (std::size_t i = 0; i < g.size(); ++i) {
                s.opt_state.m[i] = c.momentum_beta * s.opt_state.m[i] + g[i];
                const double d = -s.lr * s.opt_state.m[i];
                s.params[i] += d;
                nn += d * d;
            }
            break;
        }
        case OptKind::Adam: {
            const double t = static_cast<double>(s.step_index) + 1.0;
            const double bc1 = 1.0 - std::pow(c.adam_beta1, t);
            const double bc2 = 1.0 - std::pow(c.adam_beta2, t);
            for (std::size_t i = 0; i < g.size(); ++i) {
                s.opt_state.m[i] = c.adam_beta1 * s.opt_state.m[i] + (1.0 - c.adam_beta1) * g[i];
                s.opt_state.v[i] = c.adam_beta2 * s.opt_state.v[i] + (1.0 - c.adam_beta2) * g[i] * g[i];
                const double mh = s.opt_state.m[i] / bc1;
                const double vh = s.opt_state.v[i] / bc2;
                const double d = -s.lr * mh / (std::sqrt(vh) + c.adam_eps);
                s.params[i] += d;
                nn += d * d;
            }
            break;
        }
    }
    return std::sqrt(nn);
}

}  // namespace

double batch_loss(const Task& task, const LearnerState& state, const std::vector<double>& params,
                  const Batch& batch, std::vector<double>* grad_out) {
    if (task.kind == TaskKind::BanditPolicy) {
        const BanditResolved res = resolve_bandit(task, state.params, batch);
        return range_loss(task, state, params, batch, &res, 0, batch.n, grad_out);
    }
    return range_loss(task, state, params, batch, nullptr, 0, batch.n, grad_out);
}

StepRaw train_step(LearnerState& state, const Task& task, const Batch& batch,
                   const StepHooks& hooks) {
    if (state.diverged) throw ContractError("train_step called on a diverged state");
    if (batch.splits.size() < 2) throw ContractError("batch must carry >= 2 sub-batches");

    StepRaw raw;
    raw.step = state.step_index;

    BanditResolved resolved;
    const BanditResolved* resolved_ptr = nullptr;
    if (task.kind == TaskKind::BanditPolicy) {
        resolved = resolve_bandit(task, state.params, batch);
        resolved_ptr = &resolved;
        raw.entropy = softmax_entropy(softmax(state.params));
    }

    raw.sub_grads.resize(batch.splits.size());
    for (std::size_t k = 0; k < batch.splits.size(); ++k) {
        const auto [start, len] = batch.splits[k];
        range_loss(task, state, state.params, batch, resolved_ptr, start, len, &raw.sub_grads[k]);
    }
    raw.loss = range_loss(task, state, state.params, batch, resolved_ptr, 0, batch.n, &raw.grad);

    if (!std::isfinite(raw.loss) || !all_finite(raw.grad)) {
        state.diverged = true;
        raw.diverged = true;
        return raw;
    }

    std::vector<double> g = raw.grad;
    if (hooks.grad) hooks.grad(g);
    if (!all_finite(g)) {
        state.diverged = true;
        raw.diverged = true;
        return raw;
    }
    if (state.config.clip_norm > 0.0) {
        const double gn = norm2(g);
        if (gn > state.config.clip_norm) scale(g, state.config.clip_norm / gn);
    }
    if (hooks.params) hooks.params(state.params);

    raw.update_norm = apply_update(state, g);
    state.step_index += 1;
    if (!all_finite(state.params)) {
        state.diverged = true;
        raw.diverged = true;
    }
    return raw;
}

double evaluate(const LearnerState& state, const Task& task, std::uint64_t eval_seed) {
    if (state.diverged) return kDivergedPerformance;
    if (task.kind == TaskKind::BanditPolicy) {
        const std::vector<double> probs = softmax(state.params);
        const std::vector<double> means = task.bandit_means();
        double j = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) j += probs[i] * means[i];
        return j;
    }
    const Batch eval = make_eval_batch(task, eval_seed);
    return -range_loss(task, state, state.params, eval, nullptr, 0, eval.n, nullptr);
}

}  // namespace sb
