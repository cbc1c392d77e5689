#pragma once

#include <cstdint>
#include <deque>
#include <limits>
#include <span>
#include <vector>

#include "stabilitybench/learner.hpp"

namespace sb {

enum class CoherenceMode { Pairwise, ToMean };

// One step of logged signals; the raw precursor of the monitor input y_t.
struct TelemetryRecord {
    std::uint64_t step = 0;
    double J = 0.0;
    double loss = 0.0;
    double x_gen = 0.0;   // smoothed performance trend
    double x_inst = 0.0;  // trailing-window performance variance
    double x_grad = 0.0;  // sub-batch gradient directional coherence
    double x_mem = 0.0;   // update-magnitude persistence
    double update_norm = 0.0;
    double entropy = std::numeric_limits<double>::quiet_NaN();  // policy learner only
    bool perturb_active = false;
    bool diverged = false;
};

// Mean pairwise cosine similarity over K >= 2 gradient vectors (or cosine to
// the mean gradient in ToMean mode). Zero vectors contribute 0 to their pairs.
double gradient_coherence(const std::vector<std::vector<double>>& grads,
                          CoherenceMode mode = CoherenceMode::Pairwise);

// Trailing-window fluctuation intensity: population variance over the last
// min(W, len) performance values. A full window divides by W; shorter
// prefixes divide by the actual count.
double instability_index(std::span<const double> perf_history, int window = 50);

// EMA of the performance signal. The first observation seeds the trend.
double performance_trend(double prev_trend, double new_perf, double alpha);

// EMA of the parameter-update magnitude.
double state_persistence(double prev_mem, double update_norm, double decay = 0.99);

// Running channel state for one telemetry stream.
class ChannelTracker {
public:
    ChannelTracker(double alpha = 0.1, double mem_decay = 0.99, int window = 50,
                   CoherenceMode mode = CoherenceMode::Pairwise);

    // Feeds one step's signals and returns the channel values for this step.
    struct Channels {
        double x_gen, x_inst, x_grad, x_mem;
    };
    Channels observe(double performance, double update_norm,
                     const std::vector<std::vector<double>>& sub_grads);

    // Channel recomputation from logged raw columns (replay path): identical
    // arithmetic, with the already-computed coherence column passed through.
    Channels observe_replayed(double performance, double update_norm, double x_grad);

private:
    double alpha_;
    double mem_decay_;
    int window_;
    CoherenceMode mode_;
    bool first_ = true;
    double x_gen_ = 0.0;
    double x_mem_ = 0.0;
    std::deque<double> perf_window_;

    Channels advance(double performance, double update_norm, double x_grad);
};

// Builds the immutable per-step record; enforces strictly increasing steps
// within a stream (prev_step == -1 for the first record).
TelemetryRecord assemble_record(std::uint64_t step, const StepRaw& raw, double performance,
                                const ChannelTracker::Channels& ch, bool perturb_active,
                                std::int64_t prev_step);

}  // namespace sb
