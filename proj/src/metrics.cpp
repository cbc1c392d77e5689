#include "stabilitybench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "stabilitybench/errors.hpp"

namespace sb {

double collapse_threshold(const BaselineStats& base) {
    const double spread = base.sigma_pre > 0.0
        ? base.sigma_pre
        : 1e-9 * std::max(1.0, std::abs(base.j_pre));
    return base.j_pre - 2.0 * spread;
}

BaselineStats baseline_stats(std::span<const double> perf, std::uint64_t t_s, int window) {
    if (t_s < 2 || t_s > perf.size())
        throw MetricError("baseline undefined: need at least 2 pre-injection steps, have " +
                          std::to_string(std::min<std::uint64_t>(t_s, perf.size())));
    const std::uint64_t begin = t_s > static_cast<std::uint64_t>(window)
        ? t_s - static_cast<std::uint64_t>(window)
        : 0;
    const std::uint64_t count = t_s - begin;

    double mean = 0.0;
    for (std::uint64_t i = begin; i < t_s; ++i) mean += perf[i];
    mean /= static_cast<double>(count);
    double ss = 0.0;
    for (std::uint64_t i = begin; i < t_s; ++i) {
        const double d = perf[i] - mean;
        ss += d * d;
    }
    BaselineStats b;
    b.j_pre = mean;
    b.sigma_pre = std::sqrt(ss / static_cast<double>(count));
    b.window_len = static_cast<int>(count);
    return b;
}

std::optional<std::uint64_t> collapse_time(std::span<const double> perf, std::uint64_t t_s,
                                           const BaselineStats& base, int delta,
                                           bool run_diverged) {
    const double thresh = collapse_threshold(base);
    const std::uint64_t n = perf.size();
    std::uint64_t below_start = 0;
    std::uint64_t below_len = 0;
    for (std::uint64_t t = t_s; t < n; ++t) {
        if (perf[t] < thresh) {
            if (below_len == 0) below_start = t;
            ++below_len;
            if (below_len >= static_cast<std::uint64_t>(delta)) return below_start;
        } else {
            below_len = 0;
        }
    }
    // A diverged run that ends inside a below-threshold tail counts: requiring
    // more confirmation steps after numerical divergence would be vacuous.
    if (run_diverged && below_len > 0) return below_start;
    return std::nullopt;
}

double divergence_probability(const std::vector<std::optional<std::uint64_t>>& collapse_times,
                              std::uint64_t t_max) {
    if (collapse_times.empty()) throw MetricError("divergence probability over an empty seed list");
    std::size_t hits = 0;
    const double half = static_cast<double>(t_max) / 2.0;
    for (const auto& tc : collapse_times)
        if (tc.has_value() && static_cast<double>(*tc) < half) ++hits;
    return static_cast<double>(hits) / static_cast<double>(collapse_times.size());
}

double recovery_rate(std::span<const double> perf, std::uint64_t t_s, const BaselineStats& base,
                     bool collapsed) {
    if (collapsed) throw MetricError("recovery rate is undefined for a collapsed run");
    if (t_s >= perf.size()) throw MetricError("recovery rate: no post-injection steps");
    double j_min = perf[t_s];
    for (std::uint64_t t = t_s; t < perf.size(); ++t) j_min = std::min(j_min, perf[t]);
    const double dip = base.j_pre - j_min;
    const double eps = 1e-9 * std::max(1.0, std::abs(base.j_pre));
    if (dip < eps) return 1.0;  // never dipped: perfect retention
    return (perf[perf.size() - 1] - j_min) / dip;
}

RecoveryTime recovery_time(std::span<const double> perf, std::uint64_t t_s,
                           const BaselineStats& base, int sustain) {
    const double lower = collapse_threshold(base);
    const std::uint64_t n = perf.size();
    RecoveryTime rt;

    std::uint64_t first_exit = n;
    for (std::uint64_t t = t_s; t < n; ++t) {
        if (perf[t] < lower) {
            first_exit = t;
            break;
        }
    }
    if (first_exit == n) return rt;  // never left the band: -1.0

    std::uint64_t in_band = 0;
    for (std::uint64_t t = first_exit; t < n; ++t) {
        if (perf[t] >= lower) {
            ++in_band;
            if (in_band >= static_cast<std::uint64_t>(sustain)) {
                rt.value = static_cast<double>(t - in_band + 1 - t_s);
                return rt;
            }
        } else {
            in_band = 0;
        }
    }
    rt.value = static_cast<double>(n - t_s);  // run-length sentinel
    rt.recovered = false;
    return rt;
}

SpikeIntensity spike_intensity(std::span<const double> x_inst, std::uint64_t t_s, int horizon,
                               int baseline_window) {
    if (t_s >= x_inst.size()) throw MetricError("spike intensity: injection beyond run end");
    const std::uint64_t begin = t_s > static_cast<std::uint64_t>(baseline_window)
        ? t_s - static_cast<std::uint64_t>(baseline_window)
        : 0;
    double base_mean = 0.0;
    std::uint64_t base_count = 0;
    for (std::uint64_t i = begin; i < t_s; ++i) {
        base_mean += x_inst[i];
        ++base_count;
    }
    if (base_count == 0) throw MetricError("spike intensity: no pre-injection steps");
    base_mean /= static_cast<double>(base_count);

    const std::uint64_t last =
        std::min<std::uint64_t>(x_inst.size() - 1, t_s + static_cast<std::uint64_t>(horizon));
    double peak = x_inst[t_s];
    for (std::uint64_t t = t_s; t <= last; ++t) peak = std::max(peak, x_inst[t]);

    SpikeIntensity s;
    s.raw_max = peak;
    s.baseline_quiet = base_mean < 1e-12;
    s.ratio = peak / std::max(base_mean, 1e-12);
    return s;
}

namespace {

double latent_distance(std::span<const double> latents, int k, std::uint64_t a, std::uint64_t b) {
    double ss = 0.0;
    const double* pa = latents.data() + a * static_cast<std::uint64_t>(k);
    const double* pb = latents.data() + b * static_cast<std::uint64_t>(k);
    for (int i = 0; i < k; ++i) {
        const double d = pa[i] - pb[i];
        ss += d * d;
    }
    return std::sqrt(ss);
}

}  // namespace

MetaStateDeviationResult meta_state_deviation(std::span<const double> latents, int latent_dim,
                                              std::uint64_t t_s, int horizon) {
    if (latent_dim < 1 || latents.size() % static_cast<std::size_t>(latent_dim) != 0)
        throw ContractError("latent trajectory size not a multiple of latent_dim");
    const std::uint64_t steps = latents.size() / static_cast<std::size_t>(latent_dim);
    if (t_s >= steps) throw MetricError("meta-state deviation: latent missing at injection step");

    const std::uint64_t full_end = t_s + static_cast<std::uint64_t>(horizon);
    const std::uint64_t last = std::min<std::uint64_t>(steps - 1, full_end);
    MetaStateDeviationResult r;
    r.truncated = last < full_end;
    for (std::uint64_t t = t_s; t <= last; ++t)
        r.value = std::max(r.value, latent_distance(latents, latent_dim, t, t_s));
    return r;
}

double meta_state_deviation_window(std::span<const double> latents, int latent_dim,
                                   std::uint64_t t_s,
                                   std::optional<std::uint64_t> collapse_step, int window_len) {
    const std::uint64_t steps = latents.size() / static_cast<std::size_t>(latent_dim);
    if (steps == 0 || t_s >= steps)
        throw MetricError("meta-state deviation window: latent missing at injection step");
    const std::uint64_t end = collapse_step ? std::min<std::uint64_t>(*collapse_step, steps - 1)
                                            : steps - 1;
    const std::uint64_t begin_raw = end >= static_cast<std::uint64_t>(window_len)
        ? end - static_cast<std::uint64_t>(window_len) + 1
        : 0;
    const std::uint64_t begin = std::max(begin_raw, t_s);
    double peak = 0.0;
    for (std::uint64_t t = begin; t <= end; ++t)
        peak = std::max(peak, latent_distance(latents, latent_dim, t, t_s));
    return peak;
}

double spike_intensity_window(std::span<const double> x_inst, std::uint64_t t_s,
                              std::optional<std::uint64_t> collapse_step, int window_len,
                              int baseline_window) {
    if (t_s >= x_inst.size()) throw MetricError("spike intensity window: injection beyond run end");
    const std::uint64_t begin_base = t_s > static_cast<std::uint64_t>(baseline_window)
        ? t_s - static_cast<std::uint64_t>(baseline_window)
        : 0;
    double base_mean = 0.0;
    std::uint64_t count = 0;
    for (std::uint64_t i = begin_base; i < t_s; ++i) {
        base_mean += x_inst[i];
        ++count;
    }
    if (count == 0) throw MetricError("spike intensity window: no pre-injection steps");
    base_mean /= static_cast<double>(count);

    const std::uint64_t end = collapse_step
        ? std::min<std::uint64_t>(*collapse_step, x_inst.size() - 1)
        : x_inst.size() - 1;
    const std::uint64_t begin_raw = end >= static_cast<std::uint64_t>(window_len)
        ? end - static_cast<std::uint64_t>(window_len) + 1
        : 0;
    const std::uint64_t begin = std::max(begin_raw, t_s);
    double peak = 0.0;
    for (std::uint64_t t = begin; t <= end; ++t) peak = std::max(peak, x_inst[t]);
    return peak / std::max(base_mean, 1e-12);
}

RunMetrics summarize(std::span<const double> perf, std::span<const double> x_inst,
                     std::span<const double> latents, int latent_dim, std::uint64_t t_s,
                     bool run_diverged, const MetricParams& params) {
    RunMetrics m;
    m.t_s = t_s;
    m.diverged = run_diverged;

    const BaselineStats base = baseline_stats(perf, t_s, params.baseline_window);
    m.collapse_time = collapse_time(perf, t_s, base, params.collapse_delta, run_diverged);
    if (!m.collapse_time)
        m.recovery_rate = recovery_rate(perf, t_s, base, false);
    const RecoveryTime rt = recovery_time(perf, t_s, base, params.rt_sustain);
    m.recovery_time = rt.value;
    m.recovered = rt.recovered;
    m.spike = spike_intensity(x_inst, t_s, params.horizon, params.baseline_window);

    const std::uint64_t last =
        std::min<std::uint64_t>(x_inst.size() - 1, t_s + static_cast<std::uint64_t>(params.horizon));
    m.instability_peak = x_inst[t_s];
    for (std::uint64_t t = t_s; t <= last; ++t)
        m.instability_peak = std::max(m.instability_peak, x_inst[t]);

    if (!latents.empty()) {
        m.msd = meta_state_deviation(latents, latent_dim, t_s, params.horizon);
        m.msd_precollapse = meta_state_deviation_window(latents, latent_dim, t_s, m.collapse_time,
                                                        params.baseline_window);
    }
    m.sip_precollapse = spike_intensity_window(x_inst, t_s, m.collapse_time,
                                               params.baseline_window, params.baseline_window);
    return m;
}

MeanSe mean_se(const std::vector<double>& xs) {
    MeanSe r;
    r.n = static_cast<int>(xs.size());
    if (xs.empty()) return r;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    r.mean = mean;
    if (xs.size() < 2) return r;
    double ss = 0.0;
    for (double x : xs) {
        const double d = x - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(xs.size() - 1);
    r.se = std::sqrt(var / static_cast<double>(xs.size()));
    return r;
}

AuditReport aggregate(const std::vector<std::pair<RunKey, RunMetrics>>& runs,
                      std::uint64_t t_max) {
    AuditReport report;
    report.t_max = t_max;
    if (runs.empty()) return report;
    report.config_hash = runs.front().first.config_hash;
    for (const auto& [key, _] : runs)
        if (key.config_hash != report.config_hash)
            throw ContractError("aggregate over mixed configs: " + key.config_hash + " vs " +
                                report.config_hash);

    std::map<std::pair<std::string, std::string>, std::vector<const RunMetrics*>> cells;
    for (const auto& [key, metrics] : runs)
        cells[{key.learner, key.perturbation}].push_back(&metrics);

    std::vector<double> msd_c, msd_nc, sip_c, sip_nc;
    for (const auto& [cell_key, cell_runs] : cells) {
        CellStats cs;
        cs.learner = cell_key.first;
        cs.perturbation = cell_key.second;
        cs.runs = static_cast<int>(cell_runs.size());

        std::vector<std::optional<std::uint64_t>> tcs;
        std::vector<double> tc_vals, rts, rrecs, sips, msds;
        for (const RunMetrics* m : cell_runs) {
            tcs.push_back(m->collapse_time);
            if (m->collapse_time) {
                ++cs.collapsed;
                tc_vals.push_back(static_cast<double>(*m->collapse_time));
                msd_c.push_back(m->msd_precollapse);
                sip_c.push_back(m->sip_precollapse);
            } else {
                msd_nc.push_back(m->msd_precollapse);
                sip_nc.push_back(m->sip_precollapse);
            }
            rts.push_back(m->recovery_time);
            if (m->recovery_rate) rrecs.push_back(*m->recovery_rate);
            sips.push_back(m->spike.ratio);
            msds.push_back(m->msd.value);
        }
        cs.p_div = divergence_probability(tcs, t_max);
        cs.collapse_t = mean_se(tc_vals);
        cs.rt = mean_se(rts);
        cs.r_rec = mean_se(rrecs);
        cs.sip = mean_se(sips);
        cs.msd = mean_se(msds);
        report.cells.push_back(std::move(cs));
    }
    report.msd_collapse = mean_se(msd_c);
    report.msd_noncollapse = mean_se(msd_nc);
    report.sip_collapse = mean_se(sip_c);
    report.sip_noncollapse = mean_se(sip_nc);
    return report;
}

}  // namespace sb
