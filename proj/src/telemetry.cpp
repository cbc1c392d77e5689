#include "stabilitybench/telemetry.hpp"

#include <cmath>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/vecmath.hpp"

namespace sb {

double gradient_coherence(const std::vector<std::vector<double>>& grads, CoherenceMode mode) {
    if (grads.size() < 2) throw ContractError("gradient_coherence needs at least 2 vectors");
    const std::size_t dim = grads[0].size();
    for (const auto& g : grads)
        if (g.size() != dim) throw ContractError("gradient_coherence: mismatched vector lengths");

    if (mode == CoherenceMode::ToMean) {
        std::vector<double> mean(dim, 0.0);
        for (const auto& g : grads) axpy(1.0, g, mean);
        scale(mean, 1.0 / static_cast<double>(grads.size()));
        double s = 0.0;
        for (const auto& g : grads) s += cosine(g, mean);
        return s / static_cast<double>(grads.size());
    }

    double s = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < grads.size(); ++i)
        for (std::size_t j = i + 1; j < grads.size(); ++j) {
            s += cosine(grads[i], grads[j]);
            ++pairs;
        }
    return s / static_cast<double>(pairs);
}

double instability_index(std::span<const double> perf_history, int window) {
    if (perf_history.empty()) throw ContractError("instability_index on empty history");
    const std::size_t count = std::min(perf_history.size(), static_cast<std::size_t>(window));
    const double* tail = perf_history.data() + (perf_history.size() - count);
    double mean = 0.0;
    for (std::size_t i = 0; i < count; ++i) mean += tail[i];
    mean /= static_cast<double>(count);
    double ss = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = tail[i] - mean;
        ss += d * d;
    }
    return ss / static_cast<double>(count);
}

double performance_trend(double prev_trend, double new_perf, double alpha) {
    if (!(alpha > 0.0) || alpha > 1.0)
        throw ConfigError("trend smoothing alpha must lie in (0, 1]");
    return alpha * new_perf + (1.0 - alpha) * prev_trend;
}

double state_persistence(double prev_mem, double update_norm, double decay) {
    if (update_norm < 0.0) throw ContractError("update_norm must be nonnegative");
    return decay * prev_mem + (1.0 - decay) * update_norm;
}

ChannelTracker::ChannelTracker(double alpha, double mem_decay, int window, CoherenceMode mode)
    : alpha_(alpha), mem_decay_(mem_decay), window_(window), mode_(mode) {
    if (!(alpha > 0.0) || alpha > 1.0)
        throw ConfigError("trend smoothing alpha must lie in (0, 1]");
    if (window < 1) throw ConfigError("instability window must be >= 1");
}

ChannelTracker::Channels ChannelTracker::advance(double performance, double update_norm,
                                                 double x_grad) {
    x_gen_ = first_ ? performance : performance_trend(x_gen_, performance, alpha_);
    x_mem_ = first_ ? state_persistence(0.0, update_norm, mem_decay_)
                    : state_persistence(x_mem_, update_norm, mem_decay_);
    first_ = false;

    perf_window_.push_back(performance);
    while (perf_window_.size() > static_cast<std::size_t>(window_)) perf_window_.pop_front();
    std::vector<double> window_copy(perf_window_.begin(), perf_window_.end());
    const double x_inst = instability_index(window_copy, window_);

    return Channels{x_gen_, x_inst, x_grad, x_mem_};
}

ChannelTracker::Channels ChannelTracker::observe(double performance, double update_norm,
                                                 const std::vector<std::vector<double>>& sub_grads) {
    return advance(performance, update_norm, gradient_coherence(sub_grads, mode_));
}

ChannelTracker::Channels ChannelTracker::observe_replayed(double performance, double update_norm,
                                                          double x_grad) {
    return advance(performance, update_norm, x_grad);
}

TelemetryRecord assemble_record(std::uint64_t step, const StepRaw& raw, double performance,
                                const ChannelTracker::Channels& ch, bool perturb_active,
                                std::int64_t prev_step) {
    if (prev_step >= 0 && step != static_cast<std::uint64_t>(prev_step) + 1)
        throw ContractError("telemetry records must have strictly increasing steps: got " +
                            std::to_string(step) + " after " + std::to_string(prev_step));
    TelemetryRecord rec;
    rec.step = step;
    rec.J = performance;
    // Non-finite losses can only appear on the final, diverged record; clamp
    // so the JSONL stream and the monitor input stay representable.
    rec.loss = std::isfinite(raw.loss) ? raw.loss : (raw.loss > 0 ? 1e300 : -1e300);
    rec.x_gen = ch.x_gen;
    rec.x_inst = ch.x_inst;
    rec.x_grad = ch.x_grad;
    rec.x_mem = ch.x_mem;
    rec.update_norm = std::isfinite(raw.update_norm) ? raw.update_norm : 1e300;
    rec.entropy = raw.entropy;
    rec.perturb_active = perturb_active;
    rec.diverged = raw.diverged;
    return rec;
}

}  // namespace sb
