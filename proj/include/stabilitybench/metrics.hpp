#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sb {

// Pre-injection reference statistics for the performance signal.
struct BaselineStats {
    double j_pre = 0.0;     // mean over the reference window
    double sigma_pre = 0.0; // population std over the same window
    int window_len = 0;
};

struct SpikeIntensity {
    double ratio = 1.0;   // post-injection peak over baseline mean
    double raw_max = 0.0; // unnormalized peak, kept for reanalysis
    bool baseline_quiet = false;
};

struct MetaStateDeviationResult {
    double value = 0.0;
    bool truncated = false;  // run ended before the full horizon
};

// Per-run metric suite.
struct RunMetrics {
    std::optional<std::uint64_t> collapse_time;  // T_c
    double instability_peak = 0.0;               // max x_inst over the spike horizon
    std::optional<double> recovery_rate;         // defined iff not collapsed
    double recovery_time = -1.0;                 // -1.0: never left the band
    bool recovered = true;                       // false when RT is the run-length sentinel
    SpikeIntensity spike;
    MetaStateDeviationResult msd;                // horizon-limited latent deviation
    double msd_precollapse = 0.0;  // windowed variant used by group statistics
    double sip_precollapse = 0.0;
    bool diverged = false;
    std::uint64_t t_s = 0;

    bool collapsed() const { return collapse_time.has_value(); }
};

// Collapse threshold j_pre - 2*sigma_pre, with the degenerate-baseline
// convention: sigma_pre == 0 substitutes eps_abs = 1e-9 * max(1, |j_pre|).
double collapse_threshold(const BaselineStats& base);

BaselineStats baseline_stats(std::span<const double> perf, std::uint64_t t_s, int window = 200);

// First step t >= t_s with J below threshold for delta consecutive steps; a
// diverged run whose below-threshold tail reaches the end also qualifies.
std::optional<std::uint64_t> collapse_time(std::span<const double> perf, std::uint64_t t_s,
                                           const BaselineStats& base, int delta = 100,
                                           bool run_diverged = false);

// Fraction of seeds whose collapse lands before t_max / 2.
double divergence_probability(const std::vector<std::optional<std::uint64_t>>& collapse_times,
                              std::uint64_t t_max);

// Fraction of the post-injection dip recovered by run end; 1.0 when there is
// no dip. Raises MetricError when called on a collapsed run.
double recovery_rate(std::span<const double> perf, std::uint64_t t_s, const BaselineStats& base,
                     bool collapsed);

// Steps until sustained re-entry into the performance band [threshold, inf):
// -1.0 when the band is never exited; the post-injection run length (and
// recovered=false) when it never sustainably re-enters.
struct RecoveryTime {
    double value = -1.0;
    bool recovered = true;
};
RecoveryTime recovery_time(std::span<const double> perf, std::uint64_t t_s,
                           const BaselineStats& base, int sustain = 10);

SpikeIntensity spike_intensity(std::span<const double> x_inst, std::uint64_t t_s,
                               int horizon = 500, int baseline_window = 200);

// max over [t_s, t_s + horizon] of ||h_t - h_{t_s}||_2 on a (T x k) latent
// trajectory. Raises MetricError when the latent at t_s is missing.
MetaStateDeviationResult meta_state_deviation(std::span<const double> latents, int latent_dim,
                                              std::uint64_t t_s, int horizon = 500);

// Windowed variant for collapse-group statistics: the same deviation maximum
// restricted to the window_len steps ending at T_c (or run end).
double meta_state_deviation_window(std::span<const double> latents, int latent_dim,
                                   std::uint64_t t_s,
                                   std::optional<std::uint64_t> collapse_step, int window_len);
double spike_intensity_window(std::span<const double> x_inst, std::uint64_t t_s,
                              std::optional<std::uint64_t> collapse_step, int window_len,
                              int baseline_window);

struct MetricParams {
    int instability_window = 50;   // W
    int collapse_delta = 100;      // Delta
    int horizon = 500;             // T for MSD / SIP
    int baseline_window = 200;
    std::int64_t t_max = -1;       // -1: run length
    int rt_sustain = 10;
    double trend_alpha = 0.1;
    double mem_decay = 0.99;
    int eval_every = 1;
};

// Composes the per-run metric suite from logged columns.
RunMetrics summarize(std::span<const double> perf, std::span<const double> x_inst,
                     std::span<const double> latents, int latent_dim, std::uint64_t t_s,
                     bool run_diverged, const MetricParams& params);

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
    int n = 0;
};
MeanSe mean_se(const std::vector<double>& xs);

// One (learner, perturbation) cell of the audit report.
struct CellStats {
    std::string learner;
    std::string perturbation;
    int runs = 0;
    int collapsed = 0;
    double p_div = 0.0;
    MeanSe collapse_t;  // over collapsed runs
    MeanSe rt;
    MeanSe r_rec;  // over non-collapsed runs
    MeanSe sip;
    MeanSe msd;
};

struct RunKey {
    std::string config_hash;
    std::string learner;
    std::string perturbation;
    std::uint64_t seed = 0;
};

struct AuditReport {
    std::string config_hash;
    std::uint64_t t_max = 0;
    std::vector<CellStats> cells;
    // Collapse vs non-collapse group means over the fixed pre-collapse window.
    MeanSe msd_collapse, msd_noncollapse;
    MeanSe sip_collapse, sip_noncollapse;
};

// Aggregates runs (all from the same audit config) into the report. Raises
// ContractError when config hashes are mixed.
AuditReport aggregate(const std::vector<std::pair<RunKey, RunMetrics>>& runs,
                      std::uint64_t t_max);

}  // namespace sb
