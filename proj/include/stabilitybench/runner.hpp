#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stabilitybench/config.hpp"
#include "stabilitybench/io.hpp"
#include "stabilitybench/learner.hpp"
#include "stabilitybench/metastate.hpp"
#include "stabilitybench/metrics.hpp"
#include "stabilitybench/perturb.hpp"
#include "stabilitybench/task.hpp"

namespace sb {

struct ClosedLoopConfig {
    bool enabled = false;
    double threshold = 6.0;  // latent deviation trigger
    int consecutive = 5;     // required streak length
    double damp = 0.5;       // learning-rate multiplier per activation
    std::int64_t max_activations = 1000000;
};

struct MonitorSettings {
    enum class Mode { FitFresh, Load };
    Mode mode = Mode::FitFresh;
    std::string path;  // Load mode
    int latent_dim = 8;
    MonitorFitParams fit;
};

struct AuditConfig {
    std::string name = "audit";
    Task task;
    LearnerConfig learner;
    std::uint64_t total_steps = 1000;
    std::vector<std::uint64_t> seeds;
    std::vector<PerturbationSpec> perturbations;
    MetricParams metrics;
    CoherenceMode coherence = CoherenceMode::Pairwise;
    MonitorSettings monitor;
    ClosedLoopConfig closed_loop;
};

// Schema-validated parse: unknown keys anywhere raise ConfigError naming the
// key. audit_config_node renders the effective (defaults-filled) config; its
// hash identifies every artifact the audit writes.
AuditConfig parse_audit_config(const ConfigNode& node);
ConfigNode audit_config_node(const AuditConfig& cfg);
std::string audit_hash(const AuditConfig& cfg);

// Hash of the baseline-defining subset (task, learner, seed, total_steps,
// channel parameters). Cached baselines are reused only on exact match.
std::string baseline_key(const AuditConfig& cfg, std::uint64_t seed);

void validate_audit_config(const AuditConfig& cfg);

// Injection step used for a run's metrics: the spec's resolved window start,
// or round(0.3 * total_steps) for baseline runs.
std::uint64_t resolve_t_s(const AuditConfig& cfg, const PerturbationSpec* spec);

// Conditional probe: fires a learning-rate damp after `consecutive` steps of
// deviation above the threshold, within the activation budget. Every
// evaluation is logged whether or not it fires.
class ClosedLoopProbe {
public:
    ClosedLoopProbe(const ClosedLoopConfig& cfg, double init_base_lr)
        : cfg_(cfg), lr_floor_(init_base_lr / 100.0) {}

    ClosedLoopEvent step(std::uint64_t t, double deviation, double& base_lr) {
        ClosedLoopEvent ev;
        ev.step = t;
        ev.deviation = deviation;
        if (deviation > cfg_.threshold) {
            ++streak_;
            if (streak_ >= cfg_.consecutive && fired_ < cfg_.max_activations) {
                base_lr = std::max(base_lr * cfg_.damp, lr_floor_);
                ++fired_;
                ev.fired = true;
                streak_ = 0;
            }
        } else {
            streak_ = 0;
        }
        ev.lr_after = base_lr;
        return ev;
    }

    int activations() const { return fired_; }

private:
    ClosedLoopConfig cfg_;
    double lr_floor_;
    int streak_ = 0;
    std::int64_t fired_ = 0;
};

struct RunArtifact {
    RunKey key;
    std::string dir;
    RunMetrics metrics;
    int activations = 0;  // closed-loop firings
    bool diverged = false;
};

struct AuditResult {
    std::string audit_dir;
    std::string config_hash;
    MonitorModel monitor;
    AuditReport report;
    std::vector<RunArtifact> artifacts;
};

// Executes the full audit: per seed one baseline run (cache-aware), a fitted
// or loaded monitor, one perturbed run per (seed, spec) with the closed-loop
// probe when enabled, per-run metrics and the aggregate report. Runs may
// execute concurrently (jobs > 1) with byte-identical outputs.
AuditResult run_audit(const AuditConfig& cfg, const std::string& audit_dir, int jobs = 1,
                      const std::string& cache_dir = "");

// In-memory result of replaying one run directory against the stored files.
struct ReplayResult {
    RunKey key;
    RunMetrics recomputed;
    bool verified = false;
};

// Recomputes channels, latents, and metrics from the logged raw columns and
// compares them to the stored artifacts; any mismatch raises IntegrityError
// naming the field.
ReplayResult replay_run(const std::string& run_dir, const AuditConfig& cfg,
                        const MonitorModel& monitor);

// Replays every run in an audit directory (reads config.cfg + monitor.sbmm).
std::vector<ReplayResult> replay_audit(const std::string& audit_dir);

struct SweepRow {
    double start_frac = 0.0;
    double p_div = 0.0;
    double mean_rt = 0.0;
    std::string audit_dir;
};

struct SweepResult {
    std::vector<SweepRow> rows;  // sorted by start_frac
    std::string sweep_dir;
};

// Clones the single perturbation spec across injection fractions and runs a
// full audit per fraction, sharing cached baselines.
SweepResult timing_sweep(const AuditConfig& cfg, const std::vector<double>& fracs,
                         const std::string& sweep_dir, int jobs = 1);

void write_sweep_report(const std::string& path, const SweepResult& sweep);

}  // namespace sb
