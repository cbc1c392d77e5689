#include "stabilitybench/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/rng.hpp"

namespace sb {

namespace {

constexpr char kMagic[4] = {'S', 'B', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

struct Writer {
    std::vector<std::uint8_t> out;

    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { bytes(&v, 2); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void vec(const std::vector<double>& v) {
        u64(v.size());
        if (!v.empty()) bytes(v.data(), v.size() * sizeof(double));
    }
};

struct Reader {
    const std::vector<std::uint8_t>& in;
    std::size_t pos = 0;

    explicit Reader(const std::vector<std::uint8_t>& b) : in(b) {}

    void bytes(void* p, std::size_t n) {
        if (pos + n > in.size())
            throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
        std::memcpy(p, in.data() + pos, n);
        pos += n;
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint16_t u16() { std::uint16_t v; bytes(&v, 2); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    double f64() { double v; bytes(&v, 8); return v; }
    std::vector<double> vec() {
        const std::uint64_t n = u64();
        if (n > (in.size() - pos) / sizeof(double))
            throw CheckpointError("checkpoint vector length " + std::to_string(n) +
                                  " exceeds remaining payload");
        std::vector<double> v(n);
        if (n) bytes(v.data(), n * sizeof(double));
        return v;
    }
};

}  // namespace

std::vector<std::uint8_t> serialize_state(const LearnerState& s) {
    Writer w;
    w.bytes(kMagic, 4);
    w.u16(kVersion);
    w.u8(static_cast<std::uint8_t>(s.task_kind));
    w.u8(static_cast<std::uint8_t>(s.config.opt));
    w.u8(s.diverged ? 1 : 0);
    w.u64(s.step_index);
    w.f64(s.lr);
    w.f64(s.base_lr);
    w.f64(s.entropy_coef);
    w.f64(s.config.lr);
    w.f64(s.config.momentum_beta);
    w.f64(s.config.adam_beta1);
    w.f64(s.config.adam_beta2);
    w.f64(s.config.adam_eps);
    w.f64(s.config.clip_norm);
    w.f64(s.config.entropy_coef);
    w.u64(s.blocks.size());
    for (std::size_t b : s.blocks) w.u64(b);
    w.vec(s.params);
    w.vec(s.opt_state.m);
    w.vec(s.opt_state.v);
    for (std::uint64_t word : s.rng.state()) w.u64(word);
    w.u64(fnv1a(w.out.data(), w.out.size()));
    return w.out;
}

LearnerState restore_state(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 + 2 + 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw CheckpointError("not a checkpoint: bad magic");
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored_sum;
    std::memcpy(&stored_sum, bytes.data() + body, 8);
    if (fnv1a(bytes.data(), body) != stored_sum)
        throw CheckpointError("checkpoint checksum mismatch");

    Reader r(bytes);
    r.pos = 4;
    const std::uint16_t version = r.u16();
    if (version != kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

    LearnerState s;
    s.task_kind = static_cast<TaskKind>(r.u8());
    s.config.opt = static_cast<OptKind>(r.u8());
    s.diverged = r.u8() != 0;
    s.step_index = r.u64();
    s.lr = r.f64();
    s.base_lr = r.f64();
    s.entropy_coef = r.f64();
    s.config.lr = r.f64();
    s.config.momentum_beta = r.f64();
    s.config.adam_beta1 = r.f64();
    s.config.adam_beta2 = r.f64();
    s.config.adam_eps = r.f64();
    s.config.clip_norm = r.f64();
    s.config.entropy_coef = r.f64();
    const std::uint64_t nblocks = r.u64();
    if (nblocks > 1u << 20) throw CheckpointError("implausible block count");
    s.blocks.resize(nblocks);
    for (auto& b : s.blocks) b = r.u64();
    s.params = r.vec();
    s.opt_state.m = r.vec();
    s.opt_state.v = r.vec();
    Rng::State rs;
    for (auto& word : rs) word = r.u64();
    s.rng.set_state(rs);

    std::size_t total = 0;
    for (std::size_t b : s.blocks) total += b;
    if (total != s.params.size())
        throw CheckpointError("checkpoint blocks inconsistent with parameter count");
    if (!s.opt_state.m.empty() && s.opt_state.m.size() != s.params.size())
        throw CheckpointError("checkpoint optimizer state inconsistent with parameter count");
    if (!s.opt_state.v.empty() && s.opt_state.v.size() != s.params.size())
        throw CheckpointError("checkpoint optimizer state inconsistent with parameter count");
    return s;
}

void write_checkpoint(const std::string& path, const LearnerState& state) {
    const std::vector<std::uint8_t> bytes = serialize_state(state);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write on checkpoint: " + path);
}

LearnerState read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return restore_state(bytes);
}

}  // namespace sb
