#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stabilitybench/learner.hpp"
#include "stabilitybench/rng.hpp"
#include "stabilitybench/task.hpp"

namespace sb {

enum class PerturbDimension { Optimization, Data, Parametric, Signal, None };

enum class PerturbKind {
    // optimization
    LrSpike,
    MomentumNoise,
    GradScale,
    AdamVScale,
    // data
    InputNoise,
    ActionNoise,
    Corrupt,
    LabelCorrupt,
    // parametric
    WeightNoise,
    LayerReset,
    // signal
    RewardNoise,
    GradSignFlip,
    LabelSmooth,
    // inert probe slot (closed-loop runs without a disturbance)
    None,
};

std::string dimension_name(PerturbDimension d);
PerturbDimension dimension_from_name(const std::string& s);
std::string perturb_kind_name(PerturbKind k);
PerturbKind perturb_kind_from_name(const std::string& s);
PerturbDimension dimension_of(PerturbKind k);
double default_magnitude(PerturbKind k);

// Declarative description of one disturbance: what to perturb, how strongly,
// and when.
struct PerturbationSpec {
    PerturbDimension dimension = PerturbDimension::None;
    PerturbKind kind = PerturbKind::None;
    double magnitude = std::numeric_limits<double>::quiet_NaN();  // NaN -> kind default
    double start_frac = 0.3;
    int duration = 10;  // steps; 1 for one-shot kinds
    int rng_stream_id = 0;
    std::string name;  // label used in artifacts; generated when empty

    double effective_magnitude() const {
        return std::isnan(magnitude) ? default_magnitude(kind) : magnitude;
    }
    std::string label() const;
};

struct ActiveWindow {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;  // inclusive
    bool empty = false;

    bool contains(std::uint64_t t) const { return !empty && t >= begin && t <= end; }
};

// Resolves the injection window [t_s, t_s + duration - 1] with
// t_s = round(start_frac * total_steps). Raises ConfigError when the window
// does not fit inside the run.
ActiveWindow resolve_schedule(const PerturbationSpec& spec, std::uint64_t total_steps);

// Compatibility validation, run before any stepping.
void validate_spec(const PerturbationSpec& spec, const Task& task, const LearnerConfig& learner);

// Seam-specific applications. Each mutates exactly one seam and draws only
// from the supplied stream.
void apply_optimization(const PerturbationSpec& spec, LearnerState& state,
                        std::vector<double>& grad, Rng& rng);
void apply_data(const PerturbationSpec& spec, Batch& batch, Rng& rng);
void apply_parametric(const PerturbationSpec& spec, LearnerState& state, const Task& task,
                      Rng& rng);
void apply_signal_batch(const PerturbationSpec& spec, const Task& task, Batch& batch, Rng& rng);
void apply_signal_grad(const PerturbationSpec& spec, std::vector<double>& grad, Rng& rng);

// Drives a list of specs through one run: resolves windows, owns the
// per-(spec, step) RNG substreams, enforces ordering
// data -> signal -> optimization -> parametric within a step, and restores
// the learning rate exactly after transient windows.
class PerturbEngine {
public:
    PerturbEngine(std::vector<PerturbationSpec> specs, const Task& task,
                  const LearnerConfig& learner, std::uint64_t total_steps, std::uint64_t run_seed);

    // Batch-side mutations (data dimension, then batch-borne signal kinds).
    void transform_batch(std::uint64_t step, Batch& batch);
    // Pre-step state mutations (learning rate, optimizer moments) and the
    // gradient hook for this step. Must be called every step.
    StepHooks pre_step(std::uint64_t step, LearnerState& state);
    // Post-step parametric mutations.
    void post_step(std::uint64_t step, LearnerState& state);

    bool any_active(std::uint64_t step) const;
    const std::vector<ActiveWindow>& windows() const { return windows_; }

private:
    std::vector<PerturbationSpec> specs_;
    std::vector<ActiveWindow> windows_;
    Task task_;
    std::uint64_t run_seed_;

    Rng stream(std::size_t spec_idx, std::uint64_t step) const;
};

}  // namespace sb
