#include "stabilitybench/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "stabilitybench/checkpoint.hpp"
#include "stabilitybench/errors.hpp"

namespace fs = std::filesystem;

namespace sb {

using ordered_json = nlohmann::ordered_json;

namespace {

void check_keys(const ConfigNode& map, const std::string& section,
                std::initializer_list<const char*> allowed) {
    for (const auto& key : map.keys()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok)
            throw ConfigError("unknown key '" + (section.empty() ? key : section + "." + key) +
                              "'");
    }
}

std::vector<double> parse_double_list(const ConfigNode& n) {
    std::vector<double> out;
    for (const auto& item : n.items()) out.push_back(item.as_double());
    return out;
}

Task parse_task(const ConfigNode& n) {
    check_keys(n, "task",
               {"kind", "seed", "dim", "classes", "hidden", "label_noise", "eig_min", "eig_max",
                "eigs", "class_sep", "arms", "arm_means", "reward_noise", "batch", "subbatches",
                "eval_samples"});
    Task t;
    t.kind = task_kind_from_name(n.get_string("kind", "quadratic"));
    if (const ConfigNode* s = n.find("seed")) t.seed = s->as_uint();
    t.data.dim = static_cast<int>(n.get_int("dim", 10));
    t.data.classes = static_cast<int>(n.get_int("classes", 4));
    t.data.hidden = static_cast<int>(n.get_int("hidden", 16));
    t.data.label_noise = n.get_double("label_noise", 0.0);
    t.data.eig_min = n.get_double("eig_min", 0.5);
    t.data.eig_max = n.get_double("eig_max", 5.0);
    if (const ConfigNode* e = n.find("eigs")) t.data.eigs = parse_double_list(*e);
    t.data.class_sep = n.get_double("class_sep", 2.0);
    t.data.arms = static_cast<int>(n.get_int("arms", 5));
    if (const ConfigNode* a = n.find("arm_means")) t.data.arm_means = parse_double_list(*a);
    t.data.reward_noise = n.get_double("reward_noise", 0.1);
    t.batch_size = static_cast<int>(n.get_int("batch", 32));
    t.subbatches = static_cast<int>(n.get_int("subbatches", 8));
    t.eval.samples = static_cast<int>(n.get_int("eval_samples", 256));
    return t;
}

LearnerConfig parse_learner(const ConfigNode& n) {
    check_keys(n, "learner",
               {"optimizer", "lr", "momentum_beta", "adam_beta1", "adam_beta2", "adam_eps", "clip",
                "entropy_coef"});
    LearnerConfig c;
    c.opt = opt_kind_from_name(n.get_string("optimizer", "sgd"));
    c.lr = n.get_double("lr", 0.01);
    c.momentum_beta = n.get_double("momentum_beta", 0.9);
    c.adam_beta1 = n.get_double("adam_beta1", 0.9);
    c.adam_beta2 = n.get_double("adam_beta2", 0.95);
    c.adam_eps = n.get_double("adam_eps", 1e-8);
    c.clip_norm = n.get_double("clip", 0.0);
    c.entropy_coef = n.get_double("entropy_coef", 0.0);
    return c;
}

PerturbationSpec parse_spec(const ConfigNode& n) {
    check_keys(n, "perturbation",
               {"dimension", "kind", "magnitude", "start_frac", "duration", "rng_stream", "name"});
    PerturbationSpec s;
    s.kind = perturb_kind_from_name(n.get_string("kind", "none"));
    s.dimension = n.find("dimension") ? dimension_from_name(n.find("dimension")->raw())
                                      : dimension_of(s.kind);
    if (const ConfigNode* m = n.find("magnitude")) s.magnitude = m->as_double();
    s.start_frac = n.get_double("start_frac", 0.3);
    s.duration = static_cast<int>(
        n.get_int("duration", s.kind == PerturbKind::LayerReset ? 1 : 10));
    s.rng_stream_id = static_cast<int>(n.get_int("rng_stream", -1));
    s.name = n.get_string("name", "");
    return s;
}

CoherenceMode coherence_from_name(const std::string& s) {
    if (s == "pairwise") return CoherenceMode::Pairwise;
    if (s == "to-mean") return CoherenceMode::ToMean;
    throw ConfigError("unknown coherence mode: '" + s + "'");
}

std::string coherence_name(CoherenceMode m) {
    return m == CoherenceMode::Pairwise ? "pairwise" : "to-mean";
}

std::string format_cfg_double(double v) { return format_double(v); }

}  // namespace

AuditConfig parse_audit_config(const ConfigNode& root) {
    check_keys(root, "",
               {"name", "total_steps", "seeds", "task", "learner", "perturbation", "metrics",
                "monitor", "closed_loop"});
    AuditConfig cfg;
    cfg.name = root.get_string("name", "audit");
    cfg.total_steps = root.find("total_steps") ? root.find("total_steps")->as_uint() : 1000;

    if (const ConfigNode* seeds = root.find("seeds"))
        for (const auto& s : seeds->items()) cfg.seeds.push_back(s.as_uint());

    if (const ConfigNode* t = root.find("task")) cfg.task = parse_task(*t);
    if (const ConfigNode* l = root.find("learner")) cfg.learner = parse_learner(*l);

    int next_stream = 0;
    for (const ConfigNode* p : root.find_all("perturbation")) {
        PerturbationSpec s = parse_spec(*p);
        if (s.rng_stream_id < 0) s.rng_stream_id = next_stream;
        ++next_stream;
        cfg.perturbations.push_back(std::move(s));
    }
    // Default labels must be unambiguous across the run set.
    std::map<std::string, int> counts;
    for (auto& s : cfg.perturbations)
        if (s.name.empty()) {
            const std::string base = perturb_kind_name(s.kind);
            const int c = ++counts[base];
            s.name = c == 1 ? base : base + "-" + std::to_string(c);
        }

    if (const ConfigNode* m = root.find("metrics")) {
        check_keys(*m, "metrics",
                   {"window", "delta", "horizon", "baseline_window", "t_max", "rt_sustain", "alpha",
                    "mem_decay", "coherence", "eval_every"});
        cfg.metrics.instability_window = static_cast<int>(m->get_int("window", 50));
        cfg.metrics.collapse_delta = static_cast<int>(m->get_int("delta", 100));
        cfg.metrics.horizon = static_cast<int>(m->get_int("horizon", 500));
        cfg.metrics.baseline_window = static_cast<int>(m->get_int("baseline_window", 200));
        cfg.metrics.t_max = m->get_int("t_max", -1);
        cfg.metrics.rt_sustain = static_cast<int>(m->get_int("rt_sustain", 10));
        cfg.metrics.trend_alpha = m->get_double("alpha", 0.1);
        cfg.metrics.mem_decay = m->get_double("mem_decay", 0.99);
        cfg.coherence = coherence_from_name(m->get_string("coherence", "pairwise"));
        cfg.metrics.eval_every = static_cast<int>(m->get_int("eval_every", 1));
    }

    if (const ConfigNode* mo = root.find("monitor")) {
        check_keys(*mo, "monitor", {"mode", "path", "latent_dim", "epochs", "lr", "tbptt", "seed"});
        const std::string mode = mo->get_string("mode", "fit-fresh");
        if (mode == "fit-fresh")
            cfg.monitor.mode = MonitorSettings::Mode::FitFresh;
        else if (mode == "load")
            cfg.monitor.mode = MonitorSettings::Mode::Load;
        else
            throw ConfigError("monitor.mode must be fit-fresh or load, got '" + mode + "'");
        cfg.monitor.path = mo->get_string("path", "");
        cfg.monitor.latent_dim = static_cast<int>(mo->get_int("latent_dim", 8));
        cfg.monitor.fit.epochs = static_cast<int>(mo->get_int("epochs", 40));
        cfg.monitor.fit.lr = mo->get_double("lr", 0.01);
        cfg.monitor.fit.tbptt = static_cast<int>(mo->get_int("tbptt", 32));
        if (const ConfigNode* s = mo->find("seed")) cfg.monitor.fit.seed = s->as_uint();
    }

    if (const ConfigNode* cl = root.find("closed_loop")) {
        check_keys(*cl, "closed_loop",
                   {"enabled", "threshold", "consecutive", "damp", "max_activations"});
        cfg.closed_loop.enabled = cl->get_bool("enabled", false);
        cfg.closed_loop.threshold = cl->get_double("threshold", 6.0);
        cfg.closed_loop.consecutive = static_cast<int>(cl->get_int("consecutive", 5));
        cfg.closed_loop.damp = cl->get_double("damp", 0.5);
        cfg.closed_loop.max_activations = cl->get_int("max_activations", 1000000);
    }
    return cfg;
}

ConfigNode audit_config_node(const AuditConfig& cfg) {
    ConfigNode root = ConfigNode::map();
    root.insert("name", ConfigNode::scalar(cfg.name));
    root.insert("total_steps", ConfigNode::scalar(std::to_string(cfg.total_steps)));
    ConfigNode seeds = ConfigNode::list();
    for (std::uint64_t s : cfg.seeds) seeds.items().push_back(ConfigNode::scalar(std::to_string(s)));
    root.insert("seeds", std::move(seeds));

    ConfigNode task = ConfigNode::map();
    task.insert("kind", ConfigNode::scalar(task_kind_name(cfg.task.kind)));
    task.insert("seed", ConfigNode::scalar(std::to_string(cfg.task.seed)));
    task.insert("dim", ConfigNode::scalar(std::to_string(cfg.task.data.dim)));
    task.insert("classes", ConfigNode::scalar(std::to_string(cfg.task.data.classes)));
    task.insert("hidden", ConfigNode::scalar(std::to_string(cfg.task.data.hidden)));
    task.insert("label_noise", ConfigNode::scalar(format_cfg_double(cfg.task.data.label_noise)));
    if (cfg.task.data.eigs.empty()) {
        task.insert("eig_min", ConfigNode::scalar(format_cfg_double(cfg.task.data.eig_min)));
        task.insert("eig_max", ConfigNode::scalar(format_cfg_double(cfg.task.data.eig_max)));
    } else {
        ConfigNode eigs = ConfigNode::list();
        for (double e : cfg.task.data.eigs)
            eigs.items().push_back(ConfigNode::scalar(format_cfg_double(e)));
        task.insert("eigs", std::move(eigs));
    }
    task.insert("class_sep", ConfigNode::scalar(format_cfg_double(cfg.task.data.class_sep)));
    task.insert("arms", ConfigNode::scalar(std::to_string(cfg.task.data.arms)));
    if (!cfg.task.data.arm_means.empty()) {
        ConfigNode am = ConfigNode::list();
        for (double m : cfg.task.data.arm_means)
            am.items().push_back(ConfigNode::scalar(format_cfg_double(m)));
        task.insert("arm_means", std::move(am));
    }
    task.insert("reward_noise", ConfigNode::scalar(format_cfg_double(cfg.task.data.reward_noise)));
    task.insert("batch", ConfigNode::scalar(std::to_string(cfg.task.batch_size)));
    task.insert("subbatches", ConfigNode::scalar(std::to_string(cfg.task.subbatches)));
    task.insert("eval_samples", ConfigNode::scalar(std::to_string(cfg.task.eval.samples)));
    root.insert("task", std::move(task));

    ConfigNode learner = ConfigNode::map();
    learner.insert("optimizer", ConfigNode::scalar(opt_kind_name(cfg.learner.opt)));
    learner.insert("lr", ConfigNode::scalar(format_cfg_double(cfg.learner.lr)));
    learner.insert("momentum_beta", ConfigNode::scalar(format_cfg_double(cfg.learner.momentum_beta)));
    learner.insert("adam_beta1", ConfigNode::scalar(format_cfg_double(cfg.learner.adam_beta1)));
    learner.insert("adam_beta2", ConfigNode::scalar(format_cfg_double(cfg.learner.adam_beta2)));
    learner.insert("adam_eps", ConfigNode::scalar(format_cfg_double(cfg.learner.adam_eps)));
    learner.insert("clip", ConfigNode::scalar(format_cfg_double(cfg.learner.clip_norm)));
    learner.insert("entropy_coef", ConfigNode::scalar(format_cfg_double(cfg.learner.entropy_coef)));
    root.insert("learner", std::move(learner));

    for (const auto& s : cfg.perturbations) {
        ConfigNode p = ConfigNode::map();
        p.insert("dimension", ConfigNode::scalar(dimension_name(s.dimension)));
        p.insert("kind", ConfigNode::scalar(perturb_kind_name(s.kind)));
        p.insert("magnitude", ConfigNode::scalar(format_cfg_double(s.effective_magnitude())));
        p.insert("start_frac", ConfigNode::scalar(format_cfg_double(s.start_frac)));
        p.insert("duration", ConfigNode::scalar(std::to_string(s.duration)));
        p.insert("rng_stream", ConfigNode::scalar(std::to_string(s.rng_stream_id)));
        p.insert("name", ConfigNode::scalar(s.label()));
        root.insert("perturbation", std::move(p));
    }

    ConfigNode metrics = ConfigNode::map();
    metrics.insert("window", ConfigNode::scalar(std::to_string(cfg.metrics.instability_window)));
    metrics.insert("delta", ConfigNode::scalar(std::to_string(cfg.metrics.collapse_delta)));
    metrics.insert("horizon", ConfigNode::scalar(std::to_string(cfg.metrics.horizon)));
    metrics.insert("baseline_window",
                   ConfigNode::scalar(std::to_string(cfg.metrics.baseline_window)));
    metrics.insert("t_max", ConfigNode::scalar(std::to_string(cfg.metrics.t_max)));
    metrics.insert("rt_sustain", ConfigNode::scalar(std::to_string(cfg.metrics.rt_sustain)));
    metrics.insert("alpha", ConfigNode::scalar(format_cfg_double(cfg.metrics.trend_alpha)));
    metrics.insert("mem_decay", ConfigNode::scalar(format_cfg_double(cfg.metrics.mem_decay)));
    metrics.insert("coherence", ConfigNode::scalar(coherence_name(cfg.coherence)));
    metrics.insert("eval_every", ConfigNode::scalar(std::to_string(cfg.metrics.eval_every)));
    root.insert("metrics", std::move(metrics));

    ConfigNode monitor = ConfigNode::map();
    monitor.insert("mode", ConfigNode::scalar(cfg.monitor.mode == MonitorSettings::Mode::FitFresh
                                                  ? "fit-fresh"
                                                  : "load"));
    if (!cfg.monitor.path.empty()) monitor.insert("path", ConfigNode::scalar(cfg.monitor.path));
    monitor.insert("latent_dim", ConfigNode::scalar(std::to_string(cfg.monitor.latent_dim)));
    monitor.insert("epochs", ConfigNode::scalar(std::to_string(cfg.monitor.fit.epochs)));
    monitor.insert("lr", ConfigNode::scalar(format_cfg_double(cfg.monitor.fit.lr)));
    monitor.insert("tbptt", ConfigNode::scalar(std::to_string(cfg.monitor.fit.tbptt)));
    monitor.insert("seed", ConfigNode::scalar(std::to_string(cfg.monitor.fit.seed)));
    root.insert("monitor", std::move(monitor));

    ConfigNode cl = ConfigNode::map();
    cl.insert("enabled", ConfigNode::scalar(cfg.closed_loop.enabled ? "true" : "false"));
    cl.insert("threshold", ConfigNode::scalar(format_cfg_double(cfg.closed_loop.threshold)));
    cl.insert("consecutive", ConfigNode::scalar(std::to_string(cfg.closed_loop.consecutive)));
    cl.insert("damp", ConfigNode::scalar(format_cfg_double(cfg.closed_loop.damp)));
    cl.insert("max_activations",
              ConfigNode::scalar(std::to_string(cfg.closed_loop.max_activations)));
    root.insert("closed_loop", std::move(cl));
    return root;
}

std::string audit_hash(const AuditConfig& cfg) { return config_hash(audit_config_node(cfg)); }

std::string baseline_key(const AuditConfig& cfg, std::uint64_t seed) {
    // Everything that shapes baseline telemetry: task, learner, run length,
    // seed, and the channel parameters. Perturbations, monitor, and metric
    // windows do not.
    ConfigNode n = ConfigNode::map();
    const ConfigNode full = audit_config_node(cfg);
    n.insert("task", *full.find("task"));
    n.insert("learner", *full.find("learner"));
    n.insert("total_steps", ConfigNode::scalar(std::to_string(cfg.total_steps)));
    n.insert("seed", ConfigNode::scalar(std::to_string(seed)));
    n.insert("alpha", ConfigNode::scalar(format_cfg_double(cfg.metrics.trend_alpha)));
    n.insert("mem_decay", ConfigNode::scalar(format_cfg_double(cfg.metrics.mem_decay)));
    n.insert("window", ConfigNode::scalar(std::to_string(cfg.metrics.instability_window)));
    n.insert("coherence", ConfigNode::scalar(coherence_name(cfg.coherence)));
    n.insert("eval_every", ConfigNode::scalar(std::to_string(cfg.metrics.eval_every)));
    return config_hash(n);
}

std::uint64_t resolve_t_s(const AuditConfig& cfg, const PerturbationSpec* spec) {
    if (spec && spec->kind != PerturbKind::None)
        return resolve_schedule(*spec, cfg.total_steps).begin;
    return static_cast<std::uint64_t>(std::llround(0.3 * static_cast<double>(cfg.total_steps)));
}

void validate_audit_config(const AuditConfig& cfg) {
    if (cfg.seeds.empty()) throw ConfigError("audit needs at least one seed");
    std::set<std::uint64_t> distinct(cfg.seeds.begin(), cfg.seeds.end());
    if (distinct.size() != cfg.seeds.size()) throw ConfigError("audit seeds must be distinct");
    if (cfg.total_steps < 2 * static_cast<std::uint64_t>(cfg.metrics.baseline_window))
        throw ConfigError("total_steps must be at least twice the baseline window (" +
                          std::to_string(2 * cfg.metrics.baseline_window) + ")");
    if (cfg.task.subbatches < 2) throw ConfigError("task.subbatches must be >= 2");
    if (cfg.task.batch_size < cfg.task.subbatches)
        throw ConfigError("task.batch must be >= task.subbatches");
    if (cfg.task.eval.samples < 1) throw ConfigError("task.eval_samples must be >= 1");
    if (cfg.metrics.eval_every < 1) throw ConfigError("metrics.eval_every must be >= 1");
    if (cfg.monitor.mode == MonitorSettings::Mode::Load && cfg.monitor.path.empty())
        throw ConfigError("monitor.mode=load requires monitor.path");

    // Construction validates learner/task compatibility and the init scheme.
    init_learner(cfg.task, cfg.learner, cfg.seeds.front());

    std::set<std::string> labels;
    for (const auto& spec : cfg.perturbations) {
        validate_spec(spec, cfg.task, cfg.learner);
        resolve_schedule(spec, cfg.total_steps);
        if (resolve_t_s(cfg, &spec) < 2)
            throw ConfigError("perturbation '" + spec.label() + "' injects before step 2");
        if (!labels.insert(spec.label()).second)
            throw ConfigError("duplicate perturbation name '" + spec.label() + "'");
    }
}

namespace {

std::string learner_label(const AuditConfig& cfg) {
    std::string s = task_kind_name(cfg.task.kind) + ":" + opt_kind_name(cfg.learner.opt);
    if (cfg.learner.clip_norm > 0.0) s += "+clip";
    if (cfg.learner.entropy_coef > 0.0)
        s += "+ent" + format_double(cfg.learner.entropy_coef);
    return s;
}

struct RunOutput {
    std::vector<TelemetryRecord> records;
    LearnerState final_state;
    std::vector<ClosedLoopEvent> events;
    int activations = 0;
    bool diverged = false;
};

void columns(const std::vector<TelemetryRecord>& records, std::vector<double>& perf,
             std::vector<double>& x_inst) {
    perf.clear();
    x_inst.clear();
    perf.reserve(records.size());
    x_inst.reserve(records.size());
    for (const auto& r : records) {
        perf.push_back(r.J);
        x_inst.push_back(r.x_inst);
    }
}

// Performance floor for a diverged run: pre-perturbation mean minus 1e6.
double divergence_floor(const std::vector<double>& perf, std::uint64_t t, std::uint64_t t_s,
                        int baseline_window) {
    std::uint64_t end = std::min<std::uint64_t>(t, t_s);
    if (end == 0) return -1e6;
    const std::uint64_t begin = end > static_cast<std::uint64_t>(baseline_window)
        ? end - static_cast<std::uint64_t>(baseline_window)
        : 0;
    double mean = 0.0;
    for (std::uint64_t i = begin; i < end; ++i) mean += perf[i];
    mean /= static_cast<double>(end - begin);
    return mean - 1e6;
}

RunOutput execute_run(const AuditConfig& cfg, std::uint64_t seed, const PerturbationSpec* spec,
                      const MonitorModel* monitor) {
    RunOutput out;
    LearnerState state = init_learner(cfg.task, cfg.learner, seed);
    const double init_base_lr = state.base_lr;

    std::vector<PerturbationSpec> specs;
    if (spec) specs.push_back(*spec);
    PerturbEngine engine(specs, cfg.task, cfg.learner, cfg.total_steps, seed);

    ChannelTracker tracker(cfg.metrics.trend_alpha, cfg.metrics.mem_decay,
                           cfg.metrics.instability_window, cfg.coherence);
    const std::uint64_t t_s = resolve_t_s(cfg, spec);
    const bool closed_loop = cfg.closed_loop.enabled && spec != nullptr && monitor != nullptr;

    std::vector<double> perf;
    perf.reserve(cfg.total_steps);
    std::vector<double> h(monitor ? static_cast<std::size_t>(monitor->latent_dim) : 0, 0.0);
    ClosedLoopProbe probe(cfg.closed_loop, init_base_lr);
    std::int64_t prev_step = -1;
    double last_j = 0.0;

    for (std::uint64_t t = 0; t < cfg.total_steps; ++t) {
        Batch batch = make_batch(cfg.task, seed, t);
        engine.transform_batch(t, batch);
        const StepHooks hooks = engine.pre_step(t, state);
        StepRaw raw = train_step(state, cfg.task, batch, hooks);
        if (!state.diverged) engine.post_step(t, state);

        double j;
        if (state.diverged) {
            j = divergence_floor(perf, t, t_s, cfg.metrics.baseline_window);
            raw.diverged = true;
        } else if (cfg.metrics.eval_every == 1 || t % static_cast<std::uint64_t>(cfg.metrics.eval_every) == 0) {
            j = evaluate(state, cfg.task, mix_seed(seed, "eval", t));
            if (!std::isfinite(j)) {
                state.diverged = true;
                raw.diverged = true;
                j = divergence_floor(perf, t, t_s, cfg.metrics.baseline_window);
            }
            last_j = j;
        } else {
            j = last_j;
        }
        perf.push_back(j);

        const auto ch = tracker.observe(j, raw.update_norm, raw.sub_grads);
        const TelemetryRecord rec =
            assemble_record(t, raw, j, ch, engine.any_active(t), prev_step);
        prev_step = static_cast<std::int64_t>(t);
        out.records.push_back(rec);

        if (monitor) {
            h = encode_step(*monitor, h, normalize_telemetry(rec, monitor->norm));
            if (closed_loop)
                out.events.push_back(probe.step(t, deviation_score(*monitor, h), state.base_lr));
        }

        if (state.diverged) break;  // run terminates with the diverged marker
    }

    out.activations = probe.activations();
    out.final_state = std::move(state);
    out.diverged = out.final_state.diverged;
    return out;
}

struct RunFiles {
    std::string dir;
    std::string telemetry, latents, checkpoint, metrics, closed_loop;
};

RunFiles run_files(const std::string& audit_dir, const std::string& label, std::uint64_t seed) {
    RunFiles f;
    std::ostringstream dir;
    dir << audit_dir << "/runs/" << label << "-seed" << seed;
    f.dir = dir.str();
    f.telemetry = f.dir + "/telemetry.jsonl";
    f.latents = f.dir + "/latents.sblt";
    f.checkpoint = f.dir + "/checkpoint.sbck";
    f.metrics = f.dir + "/metrics.json";
    f.closed_loop = f.dir + "/closed_loop.jsonl";
    return f;
}

void write_monitor_summary(const std::string& path, const MonitorModel& m) {
    ordered_json j;
    j["format"] = "sb-monitor-summary";
    j["latent_dim"] = m.latent_dim;
    j["channels"] = monitor_channel_names();
    j["train_epochs"] = m.train_epochs;
    j["final_one_step_loss"] = m.final_loss;
    j["train_seed"] = m.train_seed;
    j["spectral_norm_A"] = spectral_norm_estimate(m.A, m.latent_dim);
    j["norm_mean"] = m.norm.mean;
    j["norm_std"] = m.norm.std;
    j["baseline_latent_mean"] = m.baseline_mean;
    j["baseline_latent_std"] = m.baseline_std;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot open monitor summary for writing: " + path);
    f << j.dump(2) << '\n';
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(jobs), n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

void write_manifest(const std::string& audit_dir, const std::string& hash,
                    const std::vector<std::string>& completed, bool aborted) {
    ordered_json j;
    j["format"] = "sb-manifest";
    j["config_hash"] = hash;
    j["aborted"] = aborted;
    j["runs"] = completed;
    std::ofstream f(audit_dir + "/manifest.json", std::ios::binary | std::ios::trunc);
    if (f) f << j.dump(2) << '\n';
}

}  // namespace

AuditResult run_audit(const AuditConfig& cfg, const std::string& audit_dir, int jobs,
                      const std::string& cache_dir) {
    validate_audit_config(cfg);
    const std::string hash = audit_hash(cfg);

    fs::create_directories(audit_dir + "/runs");
    {
        std::ofstream f(audit_dir + "/config.cfg", std::ios::binary | std::ios::trunc);
        if (!f) throw IntegrityError("cannot write config into " + audit_dir);
        f << audit_config_node(cfg).dump_pretty();
    }

    AuditResult result;
    result.audit_dir = audit_dir;
    result.config_hash = hash;

    std::vector<std::string> completed;
    std::mutex completed_mutex;

    try {
        // --- baseline runs ------------------------------------------------
        std::vector<std::vector<TelemetryRecord>> baselines(cfg.seeds.size());
        parallel_for(cfg.seeds.size(), jobs, [&](std::size_t i) {
            const std::uint64_t seed = cfg.seeds[i];
            const std::string bkey = baseline_key(cfg, seed);
            const RunFiles files = run_files(audit_dir, "baseline", seed);
            fs::create_directories(files.dir);

            const std::string cached = cache_dir.empty()
                ? ""
                : cache_dir + "/" + bkey;
            if (!cached.empty() && fs::exists(cached + "/telemetry.jsonl")) {
                fs::copy_file(cached + "/telemetry.jsonl", files.telemetry,
                              fs::copy_options::overwrite_existing);
                fs::copy_file(cached + "/checkpoint.sbck", files.checkpoint,
                              fs::copy_options::overwrite_existing);
                baselines[i] = read_telemetry(files.telemetry).records;
                return;
            }

            RunOutput out = execute_run(cfg, seed, nullptr, nullptr);
            TelemetryHeader header;
            header.config_hash = bkey;
            header.run_kind = "baseline";
            header.seed = seed;
            header.spec_label = "";
            header.task = task_kind_name(cfg.task.kind);
            header.learner = learner_label(cfg);
            header.wall_clock = utc_timestamp();
            {
                TelemetryWriter writer(files.telemetry, header);
                for (const auto& rec : out.records) writer.append(rec);
            }
            write_checkpoint(files.checkpoint, out.final_state);
            if (!cached.empty()) {
                fs::create_directories(cached);
                fs::copy_file(files.telemetry, cached + "/telemetry.jsonl",
                              fs::copy_options::overwrite_existing);
                fs::copy_file(files.checkpoint, cached + "/checkpoint.sbck",
                              fs::copy_options::overwrite_existing);
            }
            baselines[i] = std::move(out.records);
        });

        // --- monitor --------------------------------------------------------
        if (cfg.monitor.mode == MonitorSettings::Mode::Load) {
            result.monitor = read_monitor(cfg.monitor.path);
        } else {
            result.monitor = fit_monitor(baselines, cfg.monitor.latent_dim, cfg.monitor.fit);
        }
        write_monitor(audit_dir + "/monitor.sbmm", result.monitor);
        write_monitor_summary(audit_dir + "/monitor.json", result.monitor);

        // --- baseline latents + metrics --------------------------------------
        const std::uint64_t baseline_ts = resolve_t_s(cfg, nullptr);
        for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
            const std::uint64_t seed = cfg.seeds[i];
            const RunFiles files = run_files(audit_dir, "baseline", seed);
            const std::vector<double> latents = encode_run(result.monitor, baselines[i]);
            write_latents(files.latents, latents, result.monitor.latent_dim);

            std::vector<double> perf, x_inst;
            columns(baselines[i], perf, x_inst);
            const bool diverged = !baselines[i].empty() && baselines[i].back().diverged;
            const RunMetrics metrics =
                summarize(perf, x_inst, latents, result.monitor.latent_dim, baseline_ts, diverged,
                          cfg.metrics);

            RunArtifact art;
            art.key = RunKey{hash, learner_label(cfg), "baseline", seed};
            art.dir = files.dir;
            art.metrics = metrics;
            art.diverged = diverged;
            write_run_metrics(files.metrics, art.key, metrics);
            result.artifacts.push_back(std::move(art));
            {
                std::lock_guard<std::mutex> lock(completed_mutex);
                completed.push_back(files.dir);
            }
        }

        // --- perturbed runs ---------------------------------------------------
        struct Job {
            std::size_t seed_idx;
            std::size_t spec_idx;
        };
        std::vector<Job> jobs_list;
        for (std::size_t si = 0; si < cfg.perturbations.size(); ++si)
            for (std::size_t vi = 0; vi < cfg.seeds.size(); ++vi) jobs_list.push_back({vi, si});

        std::vector<RunArtifact> perturbed(jobs_list.size());
        parallel_for(jobs_list.size(), jobs, [&](std::size_t j) {
            const std::uint64_t seed = cfg.seeds[jobs_list[j].seed_idx];
            const PerturbationSpec& spec = cfg.perturbations[jobs_list[j].spec_idx];
            const RunFiles files = run_files(audit_dir, spec.label(), seed);
            fs::create_directories(files.dir);

            RunOutput out = execute_run(cfg, seed, &spec, &result.monitor);
            TelemetryHeader header;
            header.config_hash = hash;
            header.run_kind = "perturbed";
            header.seed = seed;
            header.spec_label = spec.label();
            header.task = task_kind_name(cfg.task.kind);
            header.learner = learner_label(cfg);
            header.wall_clock = utc_timestamp();
            {
                TelemetryWriter writer(files.telemetry, header);
                for (const auto& rec : out.records) writer.append(rec);
            }
            write_checkpoint(files.checkpoint, out.final_state);
            const std::vector<double> latents = encode_run(result.monitor, out.records);
            write_latents(files.latents, latents, result.monitor.latent_dim);
            if (cfg.closed_loop.enabled)
                write_closed_loop_log(files.closed_loop, hash, out.events);

            std::vector<double> perf, x_inst;
            columns(out.records, perf, x_inst);
            const std::uint64_t t_s = resolve_t_s(cfg, &spec);
            const RunMetrics metrics = summarize(perf, x_inst, latents,
                                                 result.monitor.latent_dim, t_s, out.diverged,
                                                 cfg.metrics);

            RunArtifact art;
            art.key = RunKey{hash, learner_label(cfg), spec.label(), seed};
            art.dir = files.dir;
            art.metrics = metrics;
            art.activations = out.activations;
            art.diverged = out.diverged;
            write_run_metrics(files.metrics, art.key, metrics);
            perturbed[j] = std::move(art);
            {
                std::lock_guard<std::mutex> lock(completed_mutex);
                completed.push_back(files.dir);
            }
        });
        for (auto& art : perturbed) result.artifacts.push_back(std::move(art));

        // --- aggregate --------------------------------------------------------
        std::vector<std::pair<RunKey, RunMetrics>> rows;
        for (const auto& art : result.artifacts) rows.emplace_back(art.key, art.metrics);
        const std::uint64_t t_max = cfg.metrics.t_max > 0
            ? static_cast<std::uint64_t>(cfg.metrics.t_max)
            : cfg.total_steps;
        result.report = aggregate(rows, t_max);
        write_report_json(audit_dir + "/report.json", result.report);
        write_report_csv(audit_dir + "/report.csv", rows, result.report);

        std::sort(completed.begin(), completed.end());
        write_manifest(audit_dir, hash, completed, false);
    } catch (...) {
        std::sort(completed.begin(), completed.end());
        write_manifest(audit_dir, hash, completed, true);
        throw;
    }
    return result;
}

namespace {

void require_equal_double(double recomputed, double stored, const std::string& field) {
    const bool both_nan = std::isnan(recomputed) && std::isnan(stored);
    if (!both_nan && std::memcmp(&recomputed, &stored, sizeof(double)) != 0)
        throw IntegrityError("replay mismatch in '" + field + "': recomputed " +
                             format_double(recomputed) + " vs stored " + format_double(stored));
}

}  // namespace

ReplayResult replay_run(const std::string& run_dir, const AuditConfig& cfg,
                        const MonitorModel& monitor) {
    const TelemetryFile tf = read_telemetry(run_dir + "/telemetry.jsonl");

    const bool is_baseline = tf.header.run_kind == "baseline";
    std::uint64_t expected_seed = tf.header.seed;
    const std::string expected_hash =
        is_baseline ? baseline_key(cfg, expected_seed) : audit_hash(cfg);
    if (tf.header.config_hash != expected_hash)
        throw IntegrityError("replay mismatch in 'config_hash': telemetry header carries " +
                             tf.header.config_hash + ", config implies " + expected_hash);

    // Channels recomputed from the raw columns must match bit-for-bit.
    ChannelTracker tracker(cfg.metrics.trend_alpha, cfg.metrics.mem_decay,
                           cfg.metrics.instability_window, cfg.coherence);
    for (const auto& rec : tf.records) {
        const auto ch = tracker.observe_replayed(rec.J, rec.update_norm, rec.x_grad);
        const std::string at = " at step " + std::to_string(rec.step);
        require_equal_double(ch.x_gen, rec.x_gen, "x_gen" + at);
        require_equal_double(ch.x_inst, rec.x_inst, "x_inst" + at);
        require_equal_double(ch.x_mem, rec.x_mem, "x_mem" + at);
    }

    const std::vector<double> latents = encode_run(monitor, tf.records);
    const auto [stored_latents, stored_k] = read_latents(run_dir + "/latents.sblt");
    if (stored_k != monitor.latent_dim || stored_latents.size() != latents.size() ||
        (!latents.empty() && std::memcmp(latents.data(), stored_latents.data(),
                                         latents.size() * sizeof(double)) != 0))
        throw IntegrityError("replay mismatch in 'latents': recomputed trajectory differs");

    const PerturbationSpec* spec = nullptr;
    if (!is_baseline) {
        for (const auto& s : cfg.perturbations)
            if (s.label() == tf.header.spec_label) spec = &s;
        if (!spec)
            throw IntegrityError("telemetry names unknown perturbation '" + tf.header.spec_label +
                                 "'");
    }
    const std::uint64_t t_s = resolve_t_s(cfg, spec);

    std::vector<double> perf, x_inst;
    perf.reserve(tf.records.size());
    x_inst.reserve(tf.records.size());
    for (const auto& r : tf.records) {
        perf.push_back(r.J);
        x_inst.push_back(r.x_inst);
    }
    const bool diverged = !tf.records.empty() && tf.records.back().diverged;
    const RunMetrics recomputed =
        summarize(perf, x_inst, latents, monitor.latent_dim, t_s, diverged, cfg.metrics);

    const auto [stored_key, stored] = read_run_metrics(run_dir + "/metrics.json");
    if (stored_key.seed != tf.header.seed)
        throw IntegrityError("replay mismatch in 'seed': metrics file disagrees with telemetry");
    if (recomputed.collapse_time != stored.collapse_time)
        throw IntegrityError("replay mismatch in 'collapse_time'");
    require_equal_double(recomputed.instability_peak, stored.instability_peak, "instability_peak");
    if (recomputed.recovery_rate.has_value() != stored.recovery_rate.has_value())
        throw IntegrityError("replay mismatch in 'recovery_rate'");
    if (recomputed.recovery_rate)
        require_equal_double(*recomputed.recovery_rate, *stored.recovery_rate, "recovery_rate");
    require_equal_double(recomputed.recovery_time, stored.recovery_time, "recovery_time");
    require_equal_double(recomputed.spike.ratio, stored.spike.ratio, "sip");
    require_equal_double(recomputed.msd.value, stored.msd.value, "msd");
    require_equal_double(recomputed.msd_precollapse, stored.msd_precollapse, "msd_precollapse");
    require_equal_double(recomputed.sip_precollapse, stored.sip_precollapse, "sip_precollapse");
    if (recomputed.diverged != stored.diverged)
        throw IntegrityError("replay mismatch in 'diverged'");

    ReplayResult r;
    r.key = stored_key;
    r.recomputed = recomputed;
    r.verified = true;
    return r;
}

std::vector<ReplayResult> replay_audit(const std::string& audit_dir) {
    const AuditConfig cfg = parse_audit_config(parse_config_file(audit_dir + "/config.cfg"));
    const MonitorModel monitor = read_monitor(audit_dir + "/monitor.sbmm");

    std::vector<std::string> run_dirs;
    for (const auto& entry : fs::directory_iterator(audit_dir + "/runs"))
        if (entry.is_directory()) run_dirs.push_back(entry.path().string());
    std::sort(run_dirs.begin(), run_dirs.end());

    std::vector<ReplayResult> results;
    for (const auto& dir : run_dirs) results.push_back(replay_run(dir, cfg, monitor));
    return results;
}

SweepResult timing_sweep(const AuditConfig& cfg, const std::vector<double>& fracs,
                         const std::string& sweep_dir, int jobs) {
    if (cfg.perturbations.size() != 1)
        throw ConfigError("timing sweep needs exactly one perturbation spec as the template");
    if (fracs.empty()) throw ConfigError("timing sweep needs at least one injection fraction");

    std::vector<double> sorted = fracs;
    std::sort(sorted.begin(), sorted.end());

    SweepResult sweep;
    sweep.sweep_dir = sweep_dir;
    const std::string cache = sweep_dir + "/baseline-cache";
    fs::create_directories(cache);

    for (double frac : sorted) {
        AuditConfig variant = cfg;
        variant.perturbations[0].start_frac = frac;
        std::ostringstream dir;
        dir << sweep_dir << "/ts-" << format_double(frac);
        const AuditResult res = run_audit(variant, dir.str(), jobs, cache);

        SweepRow row;
        row.start_frac = frac;
        row.audit_dir = dir.str();
        const std::string label = variant.perturbations[0].label();
        for (const auto& cell : res.report.cells)
            if (cell.perturbation == label) {
                row.p_div = cell.p_div;
                row.mean_rt = cell.rt.mean;
            }
        sweep.rows.push_back(row);
    }
    return sweep;
}

void write_sweep_report(const std::string& path, const SweepResult& sweep) {
    ordered_json j;
    j["format"] = "sb-sweep";
    j["version"] = 1;
    ordered_json rows = ordered_json::array();
    for (const auto& r : sweep.rows) {
        ordered_json rj;
        rj["start_frac"] = r.start_frac;
        rj["p_div"] = r.p_div;
        rj["mean_rt"] = r.mean_rt;
        rj["audit_dir"] = r.audit_dir;
        rows.push_back(rj);
    }
    j["rows"] = rows;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IntegrityError("cannot open sweep report for writing: " + path);
    f << j.dump(2) << '\n';
}

}  // namespace sb
