#include "stabilitybench/io.hpp"

#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/rng.hpp"

namespace sb {

using ordered_json = nlohmann::ordered_json;

std::string format_double(double v) {
    if (std::isnan(v)) return "null";
    char buf[40];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw ContractError("double formatting failed");
    return std::string(buf, end);
}

std::string telemetry_header_line(const TelemetryHeader& h) {
    ordered_json j;
    j["format"] = "sb-telemetry";
    j["version"] = h.format_version;
    j["config_hash"] = h.config_hash;
    j["run"] = h.run_kind;
    j["seed"] = h.seed;
    j["spec"] = h.spec_label;
    j["task"] = h.task;
    j["learner"] = h.learner;
    j["wall_clock"] = h.wall_clock;
    return j.dump();
}

std::string telemetry_record_line(const TelemetryRecord& r) {
    std::ostringstream os;
    os << "{\"step\":" << r.step
       << ",\"J\":" << format_double(r.J)
       << ",\"loss\":" << format_double(r.loss)
       << ",\"x_gen\":" << format_double(r.x_gen)
       << ",\"x_inst\":" << format_double(r.x_inst)
       << ",\"x_grad\":" << format_double(r.x_grad)
       << ",\"x_mem\":" << format_double(r.x_mem)
       << ",\"update_norm\":" << format_double(r.update_norm)
       << ",\"entropy\":" << format_double(r.entropy)
       << ",\"perturb_active\":" << (r.perturb_active ? "true" : "false")
       << ",\"diverged\":" << (r.diverged ? "true" : "false") << "}";
    return os.str();
}

struct TelemetryWriter::Impl {
    std::ofstream out;
};

TelemetryWriter::TelemetryWriter(const std::string& path, const TelemetryHeader& header)
    : impl_(new Impl) {
    impl_->out.open(path, std::ios::binary | std::ios::trunc);
    if (!impl_->out) {
        delete impl_;
        throw IntegrityError("cannot open telemetry file for writing: " + path);
    }
    impl_->out << telemetry_header_line(header) << '\n';
}

TelemetryWriter::~TelemetryWriter() {
    close();
    delete impl_;
}

void TelemetryWriter::append(const TelemetryRecord& rec) {
    impl_->out << telemetry_record_line(rec) << '\n';
}

void TelemetryWriter::close() {
    if (impl_->out.is_open()) impl_->out.close();
}

namespace {

double json_double(const ordered_json& j, const char* key) {
    const auto& v = j.at(key);
    if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
    return v.get<double>();
}

}  // namespace

TelemetryFile read_telemetry(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open telemetry file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw IntegrityError("empty telemetry file: " + path);

    TelemetryFile tf;
    ordered_json h = ordered_json::parse(line, nullptr, true);
    if (h.value("format", "") != "sb-telemetry")
        throw IntegrityError("not a telemetry file (bad format field): " + path);
    tf.header.format_version = h.value("version", 0);
    tf.header.config_hash = h.value("config_hash", "");
    tf.header.run_kind = h.value("run", "");
    tf.header.seed = h.value("seed", std::uint64_t{0});
    tf.header.spec_label = h.value("spec", "");
    tf.header.task = h.value("task", "");
    tf.header.learner = h.value("learner", "");
    tf.header.wall_clock = h.value("wall_clock", "");

    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        TelemetryRecord r;
        r.step = j.at("step").get<std::uint64_t>();
        r.J = json_double(j, "J");
        r.loss = json_double(j, "loss");
        r.x_gen = json_double(j, "x_gen");
        r.x_inst = json_double(j, "x_inst");
        r.x_grad = json_double(j, "x_grad");
        r.x_mem = json_double(j, "x_mem");
        r.update_norm = json_double(j, "update_norm");
        r.entropy = json_double(j, "entropy");
        r.perturb_active = j.at("perturb_active").get<bool>();
        r.diverged = j.at("diverged").get<bool>();
        tf.records.push_back(r);
    }
    return tf;
}

namespace {

constexpr char kLatentMagic[4] = {'S', 'B', 'L', 'T'};
constexpr std::uint16_t kLatentVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "latent file writer assumes a little-endian host");

}  // namespace

void write_latents(const std::string& path, const std::vector<double>& latents, int latent_dim) {
    if (latent_dim < 1 || latents.size() % static_cast<std::size_t>(latent_dim) != 0)
        throw ContractError("latent buffer size not a multiple of latent_dim");
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kLatentMagic, kLatentMagic + 4);
    auto put = [&out](const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    };
    put(&kLatentVersion, 2);
    const std::uint32_t k = static_cast<std::uint32_t>(latent_dim);
    put(&k, 4);
    const std::uint64_t frames = latents.size() / static_cast<std::size_t>(latent_dim);
    put(&frames, 8);
    put(latents.data(), latents.size() * sizeof(double));
    const std::uint64_t sum = fnv1a(out.data(), out.size());
    put(&sum, 8);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot open latent file for writing: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IntegrityError("short write on latent file: " + path);
}

std::pair<std::vector<double>, int> read_latents(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open latent file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 4 + 2 + 4 + 8 + 8 || std::memcmp(bytes.data(), kLatentMagic, 4) != 0)
        throw IntegrityError("not a latent file: bad magic in " + path);
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, 8);
    if (fnv1a(bytes.data(), body) != stored)
        throw IntegrityError("latent file checksum mismatch: " + path);

    std::size_t pos = 4;
    std::uint16_t version;
    std::memcpy(&version, bytes.data() + pos, 2);
    pos += 2;
    if (version != kLatentVersion)
        throw IntegrityError("unsupported latent file version " + std::to_string(version));
    std::uint32_t k;
    std::memcpy(&k, bytes.data() + pos, 4);
    pos += 4;
    std::uint64_t frames;
    std::memcpy(&frames, bytes.data() + pos, 8);
    pos += 8;
    if (frames * k * sizeof(double) != body - pos)
        throw IntegrityError("latent file payload size mismatch: " + path);
    std::vector<double> latents(frames * k);
    std::memcpy(latents.data(), bytes.data() + pos, latents.size() * sizeof(double));
    return {std::move(latents), static_cast<int>(k)};
}

void export_latents_csv(const std::string& path, const std::vector<double>& latents,
                        int latent_dim) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot open csv for writing: " + path);
    f << "step";
    for (int i = 0; i < latent_dim; ++i) f << ",h" << i;
    f << '\n';
    const std::size_t frames = latents.size() / static_cast<std::size_t>(latent_dim);
    for (std::size_t t = 0; t < frames; ++t) {
        f << t;
        for (int i = 0; i < latent_dim; ++i)
            f << ',' << format_double(latents[t * static_cast<std::size_t>(latent_dim) +
                                              static_cast<std::size_t>(i)]);
        f << '\n';
    }
}

namespace {

ordered_json metrics_to_json(const RunKey& key, const RunMetrics& m) {
    ordered_json j;
    j["config_hash"] = key.config_hash;
    j["learner"] = key.learner;
    j["perturbation"] = key.perturbation;
    j["seed"] = key.seed;
    j["t_s"] = m.t_s;
    if (m.collapse_time)
        j["collapse_time"] = *m.collapse_time;
    else
        j["collapse_time"] = nullptr;
    j["instability_peak"] = m.instability_peak;
    if (m.recovery_rate)
        j["recovery_rate"] = *m.recovery_rate;
    else
        j["recovery_rate"] = nullptr;
    j["recovery_time"] = m.recovery_time;
    j["recovered"] = m.recovered;
    j["sip"] = m.spike.ratio;
    j["sip_raw_max"] = m.spike.raw_max;
    j["sip_baseline_quiet"] = m.spike.baseline_quiet;
    j["msd"] = m.msd.value;
    j["msd_truncated"] = m.msd.truncated;
    j["msd_precollapse"] = m.msd_precollapse;
    j["sip_precollapse"] = m.sip_precollapse;
    j["diverged"] = m.diverged;
    return j;
}

}  // namespace

void write_run_metrics(const std::string& path, const RunKey& key, const RunMetrics& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot open metrics file for writing: " + path);
    f << metrics_to_json(key, m).dump(2) << '\n';
}

std::pair<RunKey, RunMetrics> read_run_metrics(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open metrics file: " + path);
    ordered_json j = ordered_json::parse(f);
    RunKey key;
    key.config_hash = j.at("config_hash").get<std::string>();
    key.learner = j.at("learner").get<std::string>();
    key.perturbation = j.at("perturbation").get<std::string>();
    key.seed = j.at("seed").get<std::uint64_t>();
    RunMetrics m;
    m.t_s = j.at("t_s").get<std::uint64_t>();
    if (!j.at("collapse_time").is_null())
        m.collapse_time = j.at("collapse_time").get<std::uint64_t>();
    m.instability_peak = j.at("instability_peak").get<double>();
    if (!j.at("recovery_rate").is_null()) m.recovery_rate = j.at("recovery_rate").get<double>();
    m.recovery_time = j.at("recovery_time").get<double>();
    m.recovered = j.at("recovered").get<bool>();
    m.spike.ratio = j.at("sip").get<double>();
    m.spike.raw_max = j.at("sip_raw_max").get<double>();
    m.spike.baseline_quiet = j.at("sip_baseline_quiet").get<bool>();
    m.msd.value = j.at("msd").get<double>();
    m.msd.truncated = j.at("msd_truncated").get<bool>();
    m.msd_precollapse = j.at("msd_precollapse").get<double>();
    m.sip_precollapse = j.at("sip_precollapse").get<double>();
    m.diverged = j.at("diverged").get<bool>();
    return {key, m};
}

void write_closed_loop_log(const std::string& path, const std::string& config_hash,
                           const std::vector<ClosedLoopEvent>& events) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot open closed-loop log for writing: " + path);
    ordered_json h;
    h["format"] = "sb-closed-loop";
    h["version"] = 1;
    h["config_hash"] = config_hash;
    f << h.dump() << '\n';
    for (const auto& e : events) {
        f << "{\"step\":" << e.step << ",\"deviation\":" << format_double(e.deviation)
          << ",\"fired\":" << (e.fired ? "true" : "false")
          << ",\"lr_after\":" << format_double(e.lr_after) << "}\n";
    }
}

std::vector<ClosedLoopEvent> read_closed_loop_log(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open closed-loop log: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IntegrityError("empty closed-loop log: " + path);
    std::vector<ClosedLoopEvent> events;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        ClosedLoopEvent e;
        e.step = j.at("step").get<std::uint64_t>();
        e.deviation = j.at("deviation").get<double>();
        e.fired = j.at("fired").get<bool>();
        e.lr_after = j.at("lr_after").get<double>();
        events.push_back(e);
    }
    return events;
}

namespace {

ordered_json mean_se_json(const MeanSe& m) {
    ordered_json j;
    j["mean"] = m.mean;
    j["se"] = m.se;
    j["n"] = m.n;
    return j;
}

MeanSe mean_se_from_json(const ordered_json& j) {
    MeanSe m;
    m.mean = j.at("mean").get<double>();
    m.se = j.at("se").get<double>();
    m.n = j.at("n").get<int>();
    return m;
}

}  // namespace

void write_report_json(const std::string& path, const AuditReport& report) {
    ordered_json j;
    j["format"] = "sb-report";
    j["version"] = 1;
    j["config_hash"] = report.config_hash;
    j["t_max"] = report.t_max;
    ordered_json cells = ordered_json::array();
    for (const auto& c : report.cells) {
        ordered_json cj;
        cj["learner"] = c.learner;
        cj["perturbation"] = c.perturbation;
        cj["runs"] = c.runs;
        cj["collapsed"] = c.collapsed;
        cj["p_div"] = c.p_div;
        cj["collapse_time"] = mean_se_json(c.collapse_t);
        cj["rt"] = mean_se_json(c.rt);
        cj["r_rec"] = mean_se_json(c.r_rec);
        cj["sip"] = mean_se_json(c.sip);
        cj["msd"] = mean_se_json(c.msd);
        cells.push_back(cj);
    }
    j["cells"] = cells;
    ordered_json f3;
    f3["msd_collapse"] = mean_se_json(report.msd_collapse);
    f3["msd_noncollapse"] = mean_se_json(report.msd_noncollapse);
    f3["sip_collapse"] = mean_se_json(report.sip_collapse);
    f3["sip_noncollapse"] = mean_se_json(report.sip_noncollapse);
    j["precollapse_groups"] = f3;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot open report for writing: " + path);
    f << j.dump(2) << '\n';
}

AuditReport read_report_json(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open report: " + path);
    ordered_json j = ordered_json::parse(f);
    if (j.value("format", "") != "sb-report")
        throw IntegrityError("not a report file: " + path);
    AuditReport r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.t_max = j.at("t_max").get<std::uint64_t>();
    for (const auto& cj : j.at("cells")) {
        CellStats c;
        c.learner = cj.at("learner").get<std::string>();
        c.perturbation = cj.at("perturbation").get<std::string>();
        c.runs = cj.at("runs").get<int>();
        c.collapsed = cj.at("collapsed").get<int>();
        c.p_div = cj.at("p_div").get<double>();
        c.collapse_t = mean_se_from_json(cj.at("collapse_time"));
        c.rt = mean_se_from_json(cj.at("rt"));
        c.r_rec = mean_se_from_json(cj.at("r_rec"));
        c.sip = mean_se_from_json(cj.at("sip"));
        c.msd = mean_se_from_json(cj.at("msd"));
        r.cells.push_back(c);
    }
    const auto& f3 = j.at("precollapse_groups");
    r.msd_collapse = mean_se_from_json(f3.at("msd_collapse"));
    r.msd_noncollapse = mean_se_from_json(f3.at("msd_noncollapse"));
    r.sip_collapse = mean_se_from_json(f3.at("sip_collapse"));
    r.sip_noncollapse = mean_se_from_json(f3.at("sip_noncollapse"));
    return r;
}

void write_report_csv(const std::string& path,
                      const std::vector<std::pair<RunKey, RunMetrics>>& runs,
                      const AuditReport& report) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot open csv for writing: " + path);
    f << "learner,perturbation,seed,t_c,rt,r_rec,sip,msd,p_div\n";
    for (const auto& [key, m] : runs) {
        double p_div = 0.0;
        for (const auto& c : report.cells)
            if (c.learner == key.learner && c.perturbation == key.perturbation) p_div = c.p_div;
        f << key.learner << ',' << key.perturbation << ',' << key.seed << ',';
        if (m.collapse_time)
            f << *m.collapse_time;
        else
            f << "none";
        f << ',' << format_double(m.recovery_time) << ','
          << (m.recovery_rate ? format_double(*m.recovery_rate) : std::string("none")) << ','
          << format_double(m.spike.ratio) << ',' << format_double(m.msd.value) << ','
          << format_double(p_div) << '\n';
    }
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

}  // namespace sb
