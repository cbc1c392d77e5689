#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stabilitybench/metrics.hpp"
#include "stabilitybench/telemetry.hpp"

namespace sb {

// Shortest round-trip decimal rendering of a double; parsing the result
// reproduces the exact bits, which keeps data lines hash-stable.
std::string format_double(double v);

struct TelemetryHeader {
    std::string config_hash;
    std::string run_kind;  // "baseline" | "perturbed"
    std::uint64_t seed = 0;
    std::string spec_label;
    std::string task;
    std::string learner;
    std::string wall_clock;  // confined to the header so data lines stay stable
    int format_version = 1;
};

std::string telemetry_header_line(const TelemetryHeader& h);
std::string telemetry_record_line(const TelemetryRecord& r);

// Streamed writer: header first, then one record per line.
class TelemetryWriter {
public:
    TelemetryWriter(const std::string& path, const TelemetryHeader& header);
    ~TelemetryWriter();
    TelemetryWriter(const TelemetryWriter&) = delete;
    TelemetryWriter& operator=(const TelemetryWriter&) = delete;

    void append(const TelemetryRecord& rec);
    void close();

private:
    struct Impl;
    Impl* impl_;
};

struct TelemetryFile {
    TelemetryHeader header;
    std::vector<TelemetryRecord> records;
};

TelemetryFile read_telemetry(const std::string& path);

// Latent trajectory file: "SBLT" magic, version, latent_dim, frame count,
// little-endian float64 frames, trailing checksum.
void write_latents(const std::string& path, const std::vector<double>& latents, int latent_dim);
std::pair<std::vector<double>, int> read_latents(const std::string& path);
void export_latents_csv(const std::string& path, const std::vector<double>& latents,
                        int latent_dim);

// Per-run metrics sidecar (JSON object, fixed key order).
void write_run_metrics(const std::string& path, const RunKey& key, const RunMetrics& m);
std::pair<RunKey, RunMetrics> read_run_metrics(const std::string& path);

// Closed-loop event log (JSON lines: one evaluation per step).
struct ClosedLoopEvent {
    std::uint64_t step = 0;
    double deviation = 0.0;
    bool fired = false;
    double lr_after = 0.0;
};
void write_closed_loop_log(const std::string& path, const std::string& config_hash,
                           const std::vector<ClosedLoopEvent>& events);
std::vector<ClosedLoopEvent> read_closed_loop_log(const std::string& path);

void write_report_json(const std::string& path, const AuditReport& report);
AuditReport read_report_json(const std::string& path);
void write_report_csv(const std::string& path,
                      const std::vector<std::pair<RunKey, RunMetrics>>& runs,
                      const AuditReport& report);

std::string utc_timestamp();

}  // namespace sb
