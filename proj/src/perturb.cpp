#include "stabilitybench/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/vecmath.hpp"

namespace sb {

std::string dimension_name(PerturbDimension d) {
    switch (d) {
        case PerturbDimension::Optimization: return "optimization";
        case PerturbDimension::Data: return "data";
        case PerturbDimension::Parametric: return "parametric";
        case PerturbDimension::Signal: return "signal";
        case PerturbDimension::None: return "none";
    }
    return "?";
}

PerturbDimension dimension_from_name(const std::string& s) {
    if (s == "optimization") return PerturbDimension::Optimization;
    if (s == "data") return PerturbDimension::Data;
    if (s == "parametric") return PerturbDimension::Parametric;
    if (s == "signal") return PerturbDimension::Signal;
    if (s == "none") return PerturbDimension::None;
    throw ConfigError("unknown perturbation dimension: '" + s + "'");
}

std::string perturb_kind_name(PerturbKind k) {
    switch (k) {
        case PerturbKind::LrSpike: return "lr-spike";
        case PerturbKind::MomentumNoise: return "momentum-noise";
        case PerturbKind::GradScale: return "grad-scale";
        case PerturbKind::AdamVScale: return "adam-v-scale";
        case PerturbKind::InputNoise: return "input-noise";
        case PerturbKind::ActionNoise: return "action-noise";
        case PerturbKind::Corrupt: return "corrupt";
        case PerturbKind::LabelCorrupt: return "label-corrupt";
        case PerturbKind::WeightNoise: return "weight-noise";
        case PerturbKind::LayerReset: return "layer-reset";
        case PerturbKind::RewardNoise: return "reward-noise";
        case PerturbKind::GradSignFlip: return "grad-sign-flip";
        case PerturbKind::LabelSmooth: return "label-smooth";
        case PerturbKind::None: return "none";
    }
    return "?";
}

PerturbKind perturb_kind_from_name(const std::string& s) {
    if (s == "lr-spike") return PerturbKind::LrSpike;
    if (s == "momentum-noise") return PerturbKind::MomentumNoise;
    if (s == "grad-scale") return PerturbKind::GradScale;
    if (s == "adam-v-scale") return PerturbKind::AdamVScale;
    if (s == "input-noise") return PerturbKind::InputNoise;
    if (s == "action-noise") return PerturbKind::ActionNoise;
    if (s == "corrupt") return PerturbKind::Corrupt;
    if (s == "label-corrupt") return PerturbKind::LabelCorrupt;
    if (s == "weight-noise") return PerturbKind::WeightNoise;
    if (s == "layer-reset") return PerturbKind::LayerReset;
    if (s == "reward-noise") return PerturbKind::RewardNoise;
    if (s == "grad-sign-flip") return PerturbKind::GradSignFlip;
    if (s == "label-smooth") return PerturbKind::LabelSmooth;
    if (s == "none") return PerturbKind::None;
    throw ConfigError("unknown perturbation kind: '" + s + "'");
}

PerturbDimension dimension_of(PerturbKind k) {
    switch (k) {
        case PerturbKind::LrSpike:
        case PerturbKind::MomentumNoise:
        case PerturbKind::GradScale:
        case PerturbKind::AdamVScale:
            return PerturbDimension::Optimization;
        case PerturbKind::InputNoise:
        case PerturbKind::ActionNoise:
        case PerturbKind::Corrupt:
        case PerturbKind::LabelCorrupt:
            return PerturbDimension::Data;
        case PerturbKind::WeightNoise:
        case PerturbKind::LayerReset:
            return PerturbDimension::Parametric;
        case PerturbKind::RewardNoise:
        case PerturbKind::GradSignFlip:
        case PerturbKind::LabelSmooth:
            return PerturbDimension::Signal;
        case PerturbKind::None:
            return PerturbDimension::None;
    }
    return PerturbDimension::None;
}

double default_magnitude(PerturbKind k) {
    switch (k) {
        case PerturbKind::LrSpike: return 10.0;
        case PerturbKind::MomentumNoise: return 0.1;
        case PerturbKind::GradScale: return 0.2;
        case PerturbKind::AdamVScale: return 10.0;
        case PerturbKind::InputNoise: return 0.1;
        case PerturbKind::ActionNoise: return 0.05;
        case PerturbKind::Corrupt: return 0.05;
        case PerturbKind::LabelCorrupt: return 0.05;
        case PerturbKind::WeightNoise: return 0.01;
        case PerturbKind::LayerReset: return 1.0;
        case PerturbKind::RewardNoise: return 0.5;
        case PerturbKind::GradSignFlip: return 0.1;
        case PerturbKind::LabelSmooth: return 0.2;
        case PerturbKind::None: return 0.0;
    }
    return 0.0;
}

std::string PerturbationSpec::label() const {
    if (!name.empty()) return name;
    std::ostringstream os;
    os << perturb_kind_name(kind);
    return os.str();
}

ActiveWindow resolve_schedule(const PerturbationSpec& spec, std::uint64_t total_steps) {
    ActiveWindow w;
    if (spec.kind == PerturbKind::None) {
        w.empty = true;
        return w;
    }
    if (!(spec.start_frac > 0.0) || !(spec.start_frac < 1.0))
        throw ConfigError("perturbation start_frac must lie in (0, 1), got " +
                          std::to_string(spec.start_frac));
    if (spec.duration < 1) throw ConfigError("perturbation duration must be >= 1");
    if (total_steps <= static_cast<std::uint64_t>(spec.duration))
        throw ConfigError("perturbation duration " + std::to_string(spec.duration) +
                          " does not fit in " + std::to_string(total_steps) + " steps");
    const auto t_s = static_cast<std::uint64_t>(
        std::llround(spec.start_frac * static_cast<double>(total_steps)));
    if (t_s < 1 || t_s >= total_steps)
        throw ConfigError("resolved injection step " + std::to_string(t_s) +
                          " is outside [1, " + std::to_string(total_steps - 1) + "]");
    w.begin = t_s;
    w.end = t_s + static_cast<std::uint64_t>(spec.duration) - 1;
    if (w.end >= total_steps)
        throw ConfigError("perturbation window [" + std::to_string(w.begin) + ", " +
                          std::to_string(w.end) + "] exceeds run length " +
                          std::to_string(total_steps));
    return w;
}

void validate_spec(const PerturbationSpec& spec, const Task& task, const LearnerConfig& learner) {
    if (spec.kind == PerturbKind::None) {
        if (spec.dimension != PerturbDimension::None)
            throw ConfigError("kind 'none' must use dimension 'none'");
        return;
    }
    if (dimension_of(spec.kind) != spec.dimension)
        throw ConfigError("perturbation kind '" + perturb_kind_name(spec.kind) +
                          "' does not belong to dimension '" + dimension_name(spec.dimension) + "'");

    const double mag = spec.effective_magnitude();
    switch (spec.kind) {
        case PerturbKind::Corrupt:
        case PerturbKind::LabelCorrupt:
        case PerturbKind::GradSignFlip:
        case PerturbKind::LabelSmooth:
            if (mag < 0.0 || mag > 1.0)
                throw ConfigError("fraction for '" + perturb_kind_name(spec.kind) +
                                  "' must lie in [0, 1], got " + std::to_string(mag));
            break;
        default:
            if (mag < 0.0)
                throw ConfigError("magnitude for '" + perturb_kind_name(spec.kind) +
                                  "' must be nonnegative, got " + std::to_string(mag));
            break;
    }

    const bool is_policy = task.kind == TaskKind::BanditPolicy;
    switch (spec.kind) {
        case PerturbKind::MomentumNoise:
            if (learner.opt == OptKind::Sgd)
                throw ConfigError("momentum-noise requires an optimizer with a first moment; "
                                  "plain sgd has none");
            break;
        case PerturbKind::AdamVScale:
            if (learner.opt != OptKind::Adam)
                throw ConfigError("adam-v-scale requires the adam optimizer, got '" +
                                  opt_kind_name(learner.opt) + "'");
            break;
        case PerturbKind::ActionNoise:
        case PerturbKind::RewardNoise:
            if (!is_policy)
                throw ConfigError("'" + perturb_kind_name(spec.kind) +
                                  "' applies only to the bandit-policy learner, got task '" +
                                  task_kind_name(task.kind) + "'");
            break;
        case PerturbKind::GradSignFlip:
        case PerturbKind::LabelSmooth:
        case PerturbKind::InputNoise:
        case PerturbKind::Corrupt:
        case PerturbKind::LabelCorrupt:
            if (is_policy)
                throw ConfigError("'" + perturb_kind_name(spec.kind) +
                                  "' applies only to supervised learners, got task '" +
                                  task_kind_name(task.kind) + "'");
            break;
        default:
            break;
    }
    if (spec.kind == PerturbKind::LabelCorrupt || spec.kind == PerturbKind::LabelSmooth) {
        if (task.kind == TaskKind::Quadratic)
            throw ConfigError("'" + perturb_kind_name(spec.kind) +
                              "' needs labeled data; the quadratic task has none");
    }
}

void apply_optimization(const PerturbationSpec& spec, LearnerState& state,
                        std::vector<double>& grad, Rng& rng) {
    const double mag = spec.effective_magnitude();
    if (mag == 0.0) return;  // zero magnitude is the identity for every kind
    switch (spec.kind) {
        case PerturbKind::LrSpike:
            state.lr = state.base_lr * mag;
            break;
        case PerturbKind::MomentumNoise:
            for (double& m : state.opt_state.m) m += rng.normal(0.0, mag);
            break;
        case PerturbKind::GradScale: {
            const double factor = 1.0 + rng.uniform(-mag, mag);
            scale(grad, factor);
            break;
        }
        case PerturbKind::AdamVScale:
            for (double& v : state.opt_state.v) v *= mag;
            break;
        default:
            throw ContractError("apply_optimization on non-optimization kind '" +
                                perturb_kind_name(spec.kind) + "'");
    }
}

void apply_data(const PerturbationSpec& spec, Batch& batch, Rng& rng) {
    const double mag = spec.effective_magnitude();
    if (mag == 0.0) return;
    switch (spec.kind) {
        case PerturbKind::InputNoise:
            for (double& x : batch.inputs) x += rng.normal(0.0, mag);
            break;
        case PerturbKind::ActionNoise:
            batch.logit_noise.assign(static_cast<std::size_t>(batch.dim), 0.0);
            for (double& x : batch.logit_noise) x = rng.normal(0.0, mag);
            break;
        case PerturbKind::Corrupt:
            for (double& x : batch.inputs)
                if (rng.uniform() < mag) x = rng.normal();
            break;
        case PerturbKind::LabelCorrupt: {
            // Redraw a magnitude-fraction of labels uniformly at random.
            int classes = 2;
            for (double t : batch.targets)
                classes = std::max(classes, static_cast<int>(t) + 1);
            for (double& t : batch.targets)
                if (rng.uniform() < mag)
                    t = static_cast<double>(rng.below(static_cast<std::uint64_t>(classes)));
            break;
        }
        default:
            throw ContractError("apply_data on non-data kind '" + perturb_kind_name(spec.kind) +
                                "'");
    }
}

void apply_parametric(const PerturbationSpec& spec, LearnerState& state, const Task& task,
                      Rng& rng) {
    const double mag = spec.effective_magnitude();
    if (mag == 0.0) return;
    switch (spec.kind) {
        case PerturbKind::WeightNoise:
            for (double& p : state.params) p += rng.normal(0.0, mag);
            break;
        case PerturbKind::LayerReset: {
            const std::size_t block = rng.below(state.blocks.size());
            const std::vector<double> halfwidths = block_init_halfwidths(task);
            std::size_t offset = 0;
            for (std::size_t b = 0; b < block; ++b) offset += state.blocks[b];
            const double hw = halfwidths[block];
            for (std::size_t i = 0; i < state.blocks[block]; ++i) {
                state.params[offset + i] = hw == 0.0 ? 0.0 : rng.uniform(-hw, hw);
                if (!state.opt_state.m.empty()) state.opt_state.m[offset + i] = 0.0;
                if (!state.opt_state.v.empty()) state.opt_state.v[offset + i] = 0.0;
            }
            break;
        }
        default:
            throw ContractError("apply_parametric on non-parametric kind '" +
                                perturb_kind_name(spec.kind) + "'");
    }
}

void apply_signal_batch(const PerturbationSpec& spec, const Task& task, Batch& batch, Rng& rng) {
    const double mag = spec.effective_magnitude();
    if (mag == 0.0) return;
    switch (spec.kind) {
        case PerturbKind::RewardNoise:
            batch.reward_offset.assign(static_cast<std::size_t>(batch.n), 0.0);
            for (double& x : batch.reward_offset) x = rng.normal(0.0, mag);
            break;
        case PerturbKind::LabelSmooth: {
            if (task.kind == TaskKind::Logistic) {
                for (double& y : batch.targets) y = (1.0 - mag) * y + mag / 2.0;
            } else {
                const int classes = task.data.classes;
                batch.target_dist.assign(static_cast<std::size_t>(batch.n) * classes, mag / classes);
                for (int i = 0; i < batch.n; ++i) {
                    const int label = static_cast<int>(batch.targets[static_cast<std::size_t>(i)]);
                    batch.target_dist[static_cast<std::size_t>(i) * classes + label] += 1.0 - mag;
                }
            }
            break;
        }
        default:
            throw ContractError("apply_signal_batch on kind '" + perturb_kind_name(spec.kind) +
                                "'");
    }
}

void apply_signal_grad(const PerturbationSpec& spec, std::vector<double>& grad, Rng& rng) {
    const double mag = spec.effective_magnitude();
    if (mag == 0.0) return;
    if (spec.kind != PerturbKind::GradSignFlip)
        throw ContractError("apply_signal_grad on kind '" + perturb_kind_name(spec.kind) + "'");
    for (double& g : grad)
        if (rng.uniform() < mag) g = -g;
}

PerturbEngine::PerturbEngine(std::vector<PerturbationSpec> specs, const Task& task,
                             const LearnerConfig& learner, std::uint64_t total_steps,
                             std::uint64_t run_seed)
    : specs_(std::move(specs)), task_(task), run_seed_(run_seed) {
    std::set<int> ids;
    for (const auto& spec : specs_) {
        validate_spec(spec, task, learner);
        windows_.push_back(resolve_schedule(spec, total_steps));
        if (spec.kind != PerturbKind::None && !ids.insert(spec.rng_stream_id).second)
            throw ConfigError("perturbation rng_stream_id " + std::to_string(spec.rng_stream_id) +
                              " used twice in one run");
    }
}

Rng PerturbEngine::stream(std::size_t spec_idx, std::uint64_t step) const {
    return Rng::from_stream(
        mix_seed(run_seed_, "perturb", static_cast<std::uint64_t>(specs_[spec_idx].rng_stream_id)),
        "step", step);
}

void PerturbEngine::transform_batch(std::uint64_t step, Batch& batch) {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (specs_[i].dimension != PerturbDimension::Data || !windows_[i].contains(step)) continue;
        Rng rng = stream(i, step);
        apply_data(specs_[i], batch, rng);
    }
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (specs_[i].dimension != PerturbDimension::Signal || !windows_[i].contains(step)) continue;
        if (specs_[i].kind == PerturbKind::GradSignFlip) continue;  // gradient hook
        Rng rng = stream(i, step);
        apply_signal_batch(specs_[i], task_, batch, rng);
    }
}

StepHooks PerturbEngine::pre_step(std::uint64_t step, LearnerState& state) {
    // The effective rate always derives from base_lr, so transient spikes
    // restore exactly and compose with closed-loop damping.
    state.lr = state.base_lr;

    std::vector<std::size_t> grad_ops;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (!windows_[i].contains(step)) continue;
        const PerturbationSpec& spec = specs_[i];
        if (spec.kind == PerturbKind::GradSignFlip || spec.kind == PerturbKind::GradScale) {
            grad_ops.push_back(i);
        } else if (spec.dimension == PerturbDimension::Optimization) {
            Rng rng = stream(i, step);
            std::vector<double> unused;
            apply_optimization(spec, state, unused, rng);
        }
    }

    StepHooks hooks;
    if (!grad_ops.empty()) {
        // Signal transforms precede optimization transforms on the gradient.
        std::stable_sort(grad_ops.begin(), grad_ops.end(), [this](std::size_t a, std::size_t b) {
            const bool sa = specs_[a].dimension == PerturbDimension::Signal;
            const bool sb = specs_[b].dimension == PerturbDimension::Signal;
            return sa && !sb;
        });
        std::vector<std::pair<PerturbationSpec, Rng>> ops;
        for (std::size_t i : grad_ops) ops.emplace_back(specs_[i], stream(i, step));
        LearnerState* state_ptr = &state;
        hooks.grad = [ops, state_ptr](std::vector<double>& g) mutable {
            for (auto& [spec, rng] : ops) {
                if (spec.kind == PerturbKind::GradSignFlip)
                    apply_signal_grad(spec, g, rng);
                else
                    apply_optimization(spec, *state_ptr, g, rng);
            }
        };
    }
    return hooks;
}

void PerturbEngine::post_step(std::uint64_t step, LearnerState& state) {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (specs_[i].dimension != PerturbDimension::Parametric || !windows_[i].contains(step))
            continue;
        Rng rng = stream(i, step);
        apply_parametric(specs_[i], state, task_, rng);
    }
}

bool PerturbEngine::any_active(std::uint64_t step) const {
    for (const auto& w : windows_)
        if (w.contains(step)) return true;
    return false;
}

}  // namespace sb
