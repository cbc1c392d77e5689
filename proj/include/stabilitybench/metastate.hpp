#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stabilitybench/telemetry.hpp"

namespace sb {

// Telemetry channels fed to the monitor, in order.
inline constexpr int kMonitorChannels = 6;
std::vector<std::string> monitor_channel_names();
std::vector<double> monitor_channel_vector(const TelemetryRecord& rec);

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;  // floored at 1e-8
    std::vector<std::uint8_t> degenerate;
};

struct MonitorFitParams {
    int epochs = 40;
    double lr = 0.01;
    int tbptt = 32;
    std::uint64_t seed = 0x5342;
};

// Latent state-space monitor: h_{t+1} = tanh(A h_t + B y_t) with linear
// readout C h_t predicting y_t one step ahead. Trained on unperturbed runs.
struct MonitorModel {
    int latent_dim = 8;                  // k
    int channels = kMonitorChannels;     // m
    std::vector<double> A;               // k x k
    std::vector<double> B;               // k x m
    std::vector<double> C;               // m x k
    NormStats norm;
    std::vector<double> baseline_mean;   // latent stats over baseline runs
    std::vector<double> baseline_std;    // floored at 1e-8
    int train_epochs = 0;
    double final_loss = 0.0;
    std::uint64_t train_seed = 0;

    bool operator==(const MonitorModel& other) const;
};

NormStats fit_norm_stats(const std::vector<std::vector<TelemetryRecord>>& runs);
std::vector<double> normalize_telemetry(const TelemetryRecord& rec, const NormStats& norm);

// One latent transition. h and y sizes must match the model.
std::vector<double> encode_step(const MonitorModel& model, const std::vector<double>& h,
                                const std::vector<double>& y);

// Latent trajectory of a whole stream: row t holds the state after ingesting
// record t. Pure in (model, stream).
std::vector<double> encode_run(const MonitorModel& model,
                               const std::vector<TelemetryRecord>& records);

// z-scored distance of h from the baseline latent distribution.
double deviation_score(const MonitorModel& model, const std::vector<double>& h);

// Fits A, B, C by truncated backpropagation through time with the in-repo
// Adam, then freezes baseline latent statistics. Deterministic given seed.
// Requires >= 3 runs of >= 500 steps each.
MonitorModel fit_monitor(const std::vector<std::vector<TelemetryRecord>>& baseline_runs,
                         int latent_dim, const MonitorFitParams& params);

// Versioned binary blob ("SBMM") with trailing checksum.
std::vector<std::uint8_t> serialize_monitor(const MonitorModel& model);
MonitorModel restore_monitor(const std::vector<std::uint8_t>& bytes);
void write_monitor(const std::string& path, const MonitorModel& model);
MonitorModel read_monitor(const std::string& path);

// Spectral-norm estimate of the latent transition matrix (power iteration).
double spectral_norm_estimate(const std::vector<double>& a, int k, int iters = 64);

}  // namespace sb
