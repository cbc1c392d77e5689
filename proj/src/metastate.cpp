#include "stabilitybench/metastate.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/rng.hpp"
#include "stabilitybench/vecmath.hpp"

namespace sb {

namespace {
constexpr double kStdFloor = 1e-8;
}

std::vector<std::string> monitor_channel_names() {
    return {"x_gen", "x_inst", "x_grad", "x_mem", "loss", "update_norm"};
}

std::vector<double> monitor_channel_vector(const TelemetryRecord& rec) {
    return {rec.x_gen, rec.x_inst, rec.x_grad, rec.x_mem, rec.loss, rec.update_norm};
}

bool MonitorModel::operator==(const MonitorModel& other) const {
    auto bits_equal = [](const std::vector<double>& a, const std::vector<double>& b) {
        return a.size() == b.size() &&
               (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
    };
    return latent_dim == other.latent_dim && channels == other.channels && bits_equal(A, other.A) &&
           bits_equal(B, other.B) && bits_equal(C, other.C) &&
           bits_equal(norm.mean, other.norm.mean) && bits_equal(norm.std, other.norm.std) &&
           norm.degenerate == other.norm.degenerate &&
           bits_equal(baseline_mean, other.baseline_mean) &&
           bits_equal(baseline_std, other.baseline_std) && train_epochs == other.train_epochs &&
           final_loss == other.final_loss && train_seed == other.train_seed;
}

NormStats fit_norm_stats(const std::vector<std::vector<TelemetryRecord>>& runs) {
    NormStats ns;
    ns.mean.assign(kMonitorChannels, 0.0);
    ns.std.assign(kMonitorChannels, 0.0);
    ns.degenerate.assign(kMonitorChannels, 0);

    std::uint64_t count = 0;
    for (const auto& run : runs)
        for (const auto& rec : run) {
            const std::vector<double> y = monitor_channel_vector(rec);
            for (int c = 0; c < kMonitorChannels; ++c) ns.mean[static_cast<std::size_t>(c)] += y[static_cast<std::size_t>(c)];
            ++count;
        }
    if (count == 0) throw ContractError("norm stats over empty telemetry");
    for (double& m : ns.mean) m /= static_cast<double>(count);

    for (const auto& run : runs)
        for (const auto& rec : run) {
            const std::vector<double> y = monitor_channel_vector(rec);
            for (int c = 0; c < kMonitorChannels; ++c) {
                const double d = y[static_cast<std::size_t>(c)] - ns.mean[static_cast<std::size_t>(c)];
                ns.std[static_cast<std::size_t>(c)] += d * d;
            }
        }
    for (int c = 0; c < kMonitorChannels; ++c) {
        double s = std::sqrt(ns.std[static_cast<std::size_t>(c)] / static_cast<double>(count));
        if (s < kStdFloor) {
            s = kStdFloor;
            ns.degenerate[static_cast<std::size_t>(c)] = 1;
        }
        ns.std[static_cast<std::size_t>(c)] = s;
    }
    return ns;
}

std::vector<double> normalize_telemetry(const TelemetryRecord& rec, const NormStats& norm) {
    std::vector<double> y = monitor_channel_vector(rec);
    for (int c = 0; c < kMonitorChannels; ++c)
        y[static_cast<std::size_t>(c)] =
            (y[static_cast<std::size_t>(c)] - norm.mean[static_cast<std::size_t>(c)]) /
            norm.std[static_cast<std::size_t>(c)];
    return y;
}

std::vector<double> encode_step(const MonitorModel& model, const std::vector<double>& h,
                                const std::vector<double>& y) {
    const int k = model.latent_dim;
    const int m = model.channels;
    if (h.size() != static_cast<std::size_t>(k) || y.size() != static_cast<std::size_t>(m))
        throw ContractError("encode_step: dimension mismatch");
    std::vector<double> z(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        double s = 0.0;
        const double* arow = model.A.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) s += arow[j] * h[static_cast<std::size_t>(j)];
        const double* brow = model.B.data() + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) s += brow[j] * y[static_cast<std::size_t>(j)];
        z[static_cast<std::size_t>(i)] = std::tanh(s);
    }
    return z;
}

std::vector<double> encode_run(const MonitorModel& model,
                               const std::vector<TelemetryRecord>& records) {
    const int k = model.latent_dim;
    std::vector<double> latents(records.size() * static_cast<std::size_t>(k));
    std::vector<double> h(static_cast<std::size_t>(k), 0.0);
    for (std::size_t t = 0; t < records.size(); ++t) {
        h = encode_step(model, h, normalize_telemetry(records[t], model.norm));
        std::memcpy(latents.data() + t * static_cast<std::size_t>(k), h.data(),
                    static_cast<std::size_t>(k) * sizeof(double));
    }
    return latents;
}

double deviation_score(const MonitorModel& model, const std::vector<double>& h) {
    if (h.size() != static_cast<std::size_t>(model.latent_dim))
        throw ContractError("deviation_score: latent dimension mismatch");
    double ss = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        const double z = (h[i] - model.baseline_mean[i]) / model.baseline_std[i];
        ss += z * z;
    }
    return std::sqrt(ss);
}

double spectral_norm_estimate(const std::vector<double>& a, int k, int iters) {
    // Power iteration on A^T A; converges to the top singular value.
    std::vector<double> v(static_cast<std::size_t>(k), 1.0 / std::sqrt(static_cast<double>(k)));
    std::vector<double> av(static_cast<std::size_t>(k));
    std::vector<double> atav(static_cast<std::size_t>(k));
    for (int it = 0; it < iters; ++it) {
        matvec(a, static_cast<std::size_t>(k), static_cast<std::size_t>(k), v, av);
        for (int i = 0; i < k; ++i) {
            double s = 0.0;
            for (int j = 0; j < k; ++j)
                s += a[static_cast<std::size_t>(j) * k + i] * av[static_cast<std::size_t>(j)];
            atav[static_cast<std::size_t>(i)] = s;
        }
        const double n = norm2(atav);
        if (n == 0.0) return 0.0;
        for (int i = 0; i < k; ++i)
            v[static_cast<std::size_t>(i)] = atav[static_cast<std::size_t>(i)] / n;
    }
    matvec(a, static_cast<std::size_t>(k), static_cast<std::size_t>(k), v, av);
    return norm2(av);
}

namespace {

struct AdamBuf {
    std::vector<double> m, v;
    double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::uint64_t t = 0;

    AdamBuf(std::size_t n, double rate) : m(n, 0.0), v(n, 0.0), lr(rate) {}

    void step(std::vector<double>& params, const std::vector<double>& grad) {
        ++t;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

// Mean squared one-step prediction error over a normalized stream with the
// current weights; optional full BPTT-free forward for reporting.
double stream_loss(const MonitorModel& model, const std::vector<std::vector<double>>& ys) {
    const int k = model.latent_dim;
    const int m = model.channels;
    std::vector<double> h(static_cast<std::size_t>(k), 0.0);
    std::vector<double> pred(static_cast<std::size_t>(m));
    double total = 0.0;
    for (const auto& y : ys) {
        matvec(model.C, static_cast<std::size_t>(m), static_cast<std::size_t>(k), h, pred);
        for (int c = 0; c < m; ++c) {
            const double e = pred[static_cast<std::size_t>(c)] - y[static_cast<std::size_t>(c)];
            total += e * e;
        }
        h = encode_step(model, h, y);
    }
    return total / (static_cast<double>(ys.size()) * m);
}

}  // namespace

MonitorModel fit_monitor(const std::vector<std::vector<TelemetryRecord>>& baseline_runs,
                         int latent_dim, const MonitorFitParams& params) {
    if (baseline_runs.size() < 3)
        throw ConfigError("monitor fitting needs >= 3 baseline runs, got " +
                          std::to_string(baseline_runs.size()));
    for (const auto& run : baseline_runs)
        if (run.size() < 500)
            throw ConfigError("monitor fitting needs >= 500 steps per baseline run, got " +
                              std::to_string(run.size()));
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");

    MonitorModel model;
    model.latent_dim = latent_dim;
    model.channels = kMonitorChannels;
    model.train_seed = params.seed;
    model.norm = fit_norm_stats(baseline_runs);

    const int k = latent_dim;
    const int m = kMonitorChannels;

    std::vector<std::vector<std::vector<double>>> streams;  // run -> step -> y
    streams.reserve(baseline_runs.size());
    for (const auto& run : baseline_runs) {
        std::vector<std::vector<double>> ys;
        ys.reserve(run.size());
        for (const auto& rec : run) ys.push_back(normalize_telemetry(rec, model.norm));
        streams.push_back(std::move(ys));
    }

    Rng rng = Rng::from_stream(params.seed, "monitor-init");
    const double init_hw = 0.2 / std::sqrt(static_cast<double>(k));
    model.A.resize(static_cast<std::size_t>(k) * k);
    model.B.resize(static_cast<std::size_t>(k) * m);
    model.C.resize(static_cast<std::size_t>(m) * k);
    for (double& x : model.A) x = rng.uniform(-init_hw, init_hw);
    for (double& x : model.B) x = rng.uniform(-init_hw, init_hw);
    for (double& x : model.C) x = rng.uniform(-init_hw, init_hw);

    const std::size_t na = model.A.size(), nb = model.B.size(), nc = model.C.size();
    AdamBuf adam(na + nb + nc, params.lr);
    std::vector<double> flat_grad(na + nb + nc);
    std::vector<double> flat(na + nb + nc);

    Rng shuffle_rng = Rng::from_stream(params.seed, "monitor-shuffle");
    std::vector<std::size_t> run_order(streams.size());
    std::iota(run_order.begin(), run_order.end(), std::size_t{0});

    const int window = std::max(2, params.tbptt);
    std::vector<std::vector<double>> hs;  // h[0..L], forward states within a segment
    std::vector<std::vector<double>> errs;

    for (int epoch = 0; epoch < params.epochs; ++epoch) {
        for (std::size_t i = run_order.size(); i > 1; --i) {
            const std::size_t j = shuffle_rng.below(i);
            std::swap(run_order[i - 1], run_order[j]);
        }
        for (std::size_t ri : run_order) {
            const auto& ys = streams[ri];
            std::vector<double> carry(static_cast<std::size_t>(k), 0.0);
            for (std::size_t seg = 0; seg < ys.size(); seg += static_cast<std::size_t>(window)) {
                const std::size_t L = std::min(static_cast<std::size_t>(window), ys.size() - seg);
                hs.assign(L + 1, std::vector<double>(static_cast<std::size_t>(k)));
                errs.assign(L, std::vector<double>(static_cast<std::size_t>(m)));
                hs[0] = carry;
                for (std::size_t t = 0; t < L; ++t) {
                    std::vector<double> pred(static_cast<std::size_t>(m));
                    matvec(model.C, static_cast<std::size_t>(m), static_cast<std::size_t>(k),
                           hs[t], pred);
                    for (int c = 0; c < m; ++c)
                        errs[t][static_cast<std::size_t>(c)] =
                            pred[static_cast<std::size_t>(c)] -
                            ys[seg + t][static_cast<std::size_t>(c)];
                    hs[t + 1] = encode_step(model, hs[t], ys[seg + t]);
                }
                carry = hs[L];

                std::fill(flat_grad.begin(), flat_grad.end(), 0.0);
                double* dA = flat_grad.data();
                double* dB = flat_grad.data() + na;
                double* dC = flat_grad.data() + na + nb;
                std::vector<double> dh_carry(static_cast<std::size_t>(k), 0.0);
                std::vector<double> dz(static_cast<std::size_t>(k));
                // Backward through the segment; gradient into the carried
                // initial state is truncated.
                const double inv = 1.0 / (static_cast<double>(L) * m);
                for (std::size_t t = L; t-- > 0;) {
                    for (int i2 = 0; i2 < k; ++i2) {
                        const double hp = hs[t + 1][static_cast<std::size_t>(i2)];
                        dz[static_cast<std::size_t>(i2)] =
                            dh_carry[static_cast<std::size_t>(i2)] * (1.0 - hp * hp);
                    }
                    for (int i2 = 0; i2 < k; ++i2) {
                        const double dzi = dz[static_cast<std::size_t>(i2)];
                        if (dzi != 0.0) {
                            double* arow = dA + static_cast<std::size_t>(i2) * k;
                            for (int j2 = 0; j2 < k; ++j2)
                                arow[j2] += dzi * hs[t][static_cast<std::size_t>(j2)];
                            double* brow = dB + static_cast<std::size_t>(i2) * m;
                            for (int j2 = 0; j2 < m; ++j2)
                                brow[j2] += dzi * ys[seg + t][static_cast<std::size_t>(j2)];
                        }
                    }
                    // dh = A^T dz + 2 C^T e, and dC += 2 e h^T (scaled by inv)
                    for (int i2 = 0; i2 < k; ++i2) {
                        double s = 0.0;
                        for (int j2 = 0; j2 < k; ++j2)
                            s += model.A[static_cast<std::size_t>(j2) * k + i2] *
                                 dz[static_cast<std::size_t>(j2)];
                        for (int c = 0; c < m; ++c)
                            s += model.C[static_cast<std::size_t>(c) * k + i2] * 2.0 * inv *
                                 errs[t][static_cast<std::size_t>(c)];
                        dh_carry[static_cast<std::size_t>(i2)] = s;
                    }
                    for (int c = 0; c < m; ++c) {
                        const double e2 = 2.0 * inv * errs[t][static_cast<std::size_t>(c)];
                        double* crow = dC + static_cast<std::size_t>(c) * k;
                        for (int j2 = 0; j2 < k; ++j2)
                            crow[j2] += e2 * hs[t][static_cast<std::size_t>(j2)];
                    }
                }

                std::memcpy(flat.data(), model.A.data(), na * sizeof(double));
                std::memcpy(flat.data() + na, model.B.data(), nb * sizeof(double));
                std::memcpy(flat.data() + na + nb, model.C.data(), nc * sizeof(double));
                adam.step(flat, flat_grad);
                std::memcpy(model.A.data(), flat.data(), na * sizeof(double));
                std::memcpy(model.B.data(), flat.data() + na, nb * sizeof(double));
                std::memcpy(model.C.data(), flat.data() + na + nb, nc * sizeof(double));
            }
        }
        // Keep the monitor itself stable: the latent map must not diverge.
        const double sigma = spectral_norm_estimate(model.A, k);
        if (sigma > 1.0) scale(model.A, 1.0 / sigma);
    }

    model.train_epochs = params.epochs;
    double total = 0.0;
    for (const auto& ys : streams) total += stream_loss(model, ys);
    model.final_loss = total / static_cast<double>(streams.size());

    // Baseline latent statistics over all baseline steps.
    model.baseline_mean.assign(static_cast<std::size_t>(k), 0.0);
    model.baseline_std.assign(static_cast<std::size_t>(k), 0.0);
    std::uint64_t count = 0;
    std::vector<std::vector<double>> all_latents;
    for (const auto& run : baseline_runs) {
        std::vector<double> lat = encode_run(model, run);
        for (std::size_t t = 0; t < run.size(); ++t) {
            for (int i = 0; i < k; ++i)
                model.baseline_mean[static_cast<std::size_t>(i)] +=
                    lat[t * static_cast<std::size_t>(k) + static_cast<std::size_t>(i)];
            ++count;
        }
        all_latents.push_back(std::move(lat));
    }
    for (double& x : model.baseline_mean) x /= static_cast<double>(count);
    for (std::size_t r = 0; r < baseline_runs.size(); ++r) {
        const auto& lat = all_latents[r];
        const std::size_t steps = baseline_runs[r].size();
        for (std::size_t t = 0; t < steps; ++t)
            for (int i = 0; i < k; ++i) {
                const double d = lat[t * static_cast<std::size_t>(k) + static_cast<std::size_t>(i)] -
                                 model.baseline_mean[static_cast<std::size_t>(i)];
                model.baseline_std[static_cast<std::size_t>(i)] += d * d;
            }
    }
    for (double& x : model.baseline_std)
        x = std::max(std::sqrt(x / static_cast<double>(count)), kStdFloor);

    return model;
}

namespace {

constexpr char kMonitorMagic[4] = {'S', 'B', 'M', 'M'};
constexpr std::uint16_t kMonitorVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "monitor blob writer assumes a little-endian host");

void put_vec(std::vector<std::uint8_t>& out, const std::vector<double>& v) {
    std::uint64_t n = v.size();
    const auto* p = reinterpret_cast<const std::uint8_t*>(&n);
    out.insert(out.end(), p, p + 8);
    const auto* d = reinterpret_cast<const std::uint8_t*>(v.data());
    out.insert(out.end(), d, d + v.size() * sizeof(double));
}

std::vector<double> get_vec(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + 8 > in.size()) throw CheckpointError("monitor blob truncated");
    std::uint64_t n;
    std::memcpy(&n, in.data() + pos, 8);
    pos += 8;
    if (n > (in.size() - pos) / sizeof(double))
        throw CheckpointError("monitor blob vector overruns payload");
    std::vector<double> v(n);
    std::memcpy(v.data(), in.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_monitor(const MonitorModel& model) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMonitorMagic, kMonitorMagic + 4);
    auto put_u16 = [&out](std::uint16_t v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + 2);
    };
    auto put_u64 = [&out](std::uint64_t v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + 8);
    };
    auto put_f64 = [&out](double v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out.insert(out.end(), p, p + 8);
    };
    put_u16(kMonitorVersion);
    put_u64(static_cast<std::uint64_t>(model.latent_dim));
    put_u64(static_cast<std::uint64_t>(model.channels));
    put_vec(out, model.A);
    put_vec(out, model.B);
    put_vec(out, model.C);
    put_vec(out, model.norm.mean);
    put_vec(out, model.norm.std);
    put_u64(model.norm.degenerate.size());
    out.insert(out.end(), model.norm.degenerate.begin(), model.norm.degenerate.end());
    put_vec(out, model.baseline_mean);
    put_vec(out, model.baseline_std);
    put_u64(static_cast<std::uint64_t>(model.train_epochs));
    put_f64(model.final_loss);
    put_u64(model.train_seed);
    put_u64(fnv1a(out.data(), out.size()));
    return out;
}

MonitorModel restore_monitor(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 + 2 + 8 || std::memcmp(bytes.data(), kMonitorMagic, 4) != 0)
        throw CheckpointError("not a monitor blob: bad magic");
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, 8);
    if (fnv1a(bytes.data(), body) != stored)
        throw CheckpointError("monitor blob checksum mismatch");

    std::size_t pos = 4;
    auto get_u16 = [&bytes, &pos]() {
        std::uint16_t v;
        std::memcpy(&v, bytes.data() + pos, 2);
        pos += 2;
        return v;
    };
    auto get_u64 = [&bytes, &pos]() {
        std::uint64_t v;
        std::memcpy(&v, bytes.data() + pos, 8);
        pos += 8;
        return v;
    };
    auto get_f64 = [&bytes, &pos]() {
        double v;
        std::memcpy(&v, bytes.data() + pos, 8);
        pos += 8;
        return v;
    };
    const std::uint16_t version = get_u16();
    if (version != kMonitorVersion)
        throw CheckpointError("unsupported monitor version " + std::to_string(version));
    MonitorModel model;
    model.latent_dim = static_cast<int>(get_u64());
    model.channels = static_cast<int>(get_u64());
    model.A = get_vec(bytes, pos);
    model.B = get_vec(bytes, pos);
    model.C = get_vec(bytes, pos);
    model.norm.mean = get_vec(bytes, pos);
    model.norm.std = get_vec(bytes, pos);
    const std::uint64_t ndeg = get_u64();
    if (ndeg > bytes.size() - pos) throw CheckpointError("monitor blob truncated");
    model.norm.degenerate.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + ndeg));
    pos += ndeg;
    model.baseline_mean = get_vec(bytes, pos);
    model.baseline_std = get_vec(bytes, pos);
    model.train_epochs = static_cast<int>(get_u64());
    model.final_loss = get_f64();
    model.train_seed = get_u64();
    return model;
}

void write_monitor(const std::string& path, const MonitorModel& model) {
    const auto bytes = serialize_monitor(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open monitor file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write on monitor file: " + path);
}

MonitorModel read_monitor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open monitor file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return restore_monitor(bytes);
}

}  // namespace sb
