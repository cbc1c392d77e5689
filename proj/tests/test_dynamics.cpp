#include <doctest.h>

#include <cmath>

#include "stabilitybench/checkpoint.hpp"
#include "stabilitybench/errors.hpp"
#include "stabilitybench/learner.hpp"
#include "stabilitybench/task.hpp"
#include "stabilitybench/vecmath.hpp"

using namespace sb;

namespace {

// Central finite differences on the frozen batch objective; the independent
// oracle for every analytic gradient.
std::vector<double> fd_gradient(const Task& task, const LearnerState& state, const Batch& batch) {
    std::vector<double> params = state.params;
    std::vector<double> g(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double x = params[i];
        const double h = 1e-6 * std::max(1.0, std::abs(x));
        params[i] = x + h;
        const double lp = batch_loss(task, state, params, batch, nullptr);
        params[i] = x - h;
        const double lm = batch_loss(task, state, params, batch, nullptr);
        params[i] = x;
        g[i] = (lp - lm) / (2.0 * h);
    }
    return g;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        ref += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

Task quadratic_task(int dim = 10, double noise = 0.0) {
    Task t;
    t.kind = TaskKind::Quadratic;
    t.data.dim = dim;
    t.data.label_noise = noise;
    t.data.eig_min = 0.8;
    t.data.eig_max = 5.0;
    t.seed = 5;
    return t;
}

Task logistic_task(int dim = 8) {
    Task t;
    t.kind = TaskKind::Logistic;
    t.data.dim = dim;
    t.data.label_noise = 0.05;
    t.seed = 6;
    return t;
}

Task mlp_task() {
    Task t;
    t.kind = TaskKind::MlpClassify;
    t.data.dim = 6;
    t.data.classes = 3;
    t.data.hidden = 5;
    t.seed = 7;
    return t;
}

Task bandit_task(std::vector<double> means = {1.0, 0.5, 0.0}) {
    Task t;
    t.kind = TaskKind::BanditPolicy;
    t.data.arms = static_cast<int>(means.size());
    t.data.arm_means = std::move(means);
    t.data.reward_noise = 0.1;
    t.batch_size = 16;
    t.subbatches = 4;
    t.seed = 8;
    return t;
}

}  // namespace

TEST_CASE("init_learner: dimensions, zeroed moments, step 0") {
    const Task q = quadratic_task();
    LearnerConfig sgd;
    sgd.opt = OptKind::Sgd;
    sgd.lr = 0.05;
    const LearnerState s = init_learner(q, sgd, 1);
    CHECK(s.params.size() == 10);
    CHECK(s.step_index == 0);
    CHECK(s.opt_state.m.empty());

    LearnerConfig adam;
    adam.opt = OptKind::Adam;
    adam.lr = 0.1;
    const Task b = bandit_task({0.5, 0.4, 0.3, 0.2, 0.1});
    const LearnerState sb_ = init_learner(b, adam, 7);
    CHECK(sb_.params.size() == 5);
    for (double p : sb_.params) CHECK(p == 0.0);  // uniform policy
    REQUIRE(sb_.opt_state.m.size() == 5);
    REQUIRE(sb_.opt_state.v.size() == 5);
    for (double m : sb_.opt_state.m) CHECK(m == 0.0);
    for (double v : sb_.opt_state.v) CHECK(v == 0.0);
}

TEST_CASE("init_learner is bitwise deterministic") {
    const Task q = quadratic_task();
    LearnerConfig c;
    c.lr = 0.05;
    CHECK(init_learner(q, c, 1) == init_learner(q, c, 1));
}

TEST_CASE("invalid configurations are named") {
    LearnerConfig c;
    c.lr = 0.0;
    CHECK_THROWS_AS(init_learner(quadratic_task(), c, 1), ConfigError);
    c.lr = 0.1;
    c.entropy_coef = 0.2;
    CHECK_THROWS_AS(init_learner(quadratic_task(), c, 1), ConfigError);
    try {
        init_learner(quadratic_task(), c, 1);
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("quadratic") != std::string::npos);
        CHECK(msg.find("sgd") != std::string::npos);
    }
}

TEST_CASE("quadratic SGD step is the exact closed form") {
    const Task q = quadratic_task();  // zero label noise: batch gradient is H theta
    LearnerConfig c;
    c.lr = 0.05;
    LearnerState s = init_learner(q, c, 3);
    const std::vector<double> theta = s.params;
    const std::vector<double> eigs = q.quadratic_eigs();

    Batch batch = make_batch(q, 11, 0);
    const StepRaw raw = train_step(s, q, batch);
    for (std::size_t j = 0; j < theta.size(); ++j)
        CHECK(s.params[j] == theta[j] - 0.05 * eigs[j] * theta[j]);
    CHECK(raw.loss > 0.0);
    CHECK(raw.sub_grads.size() == 8);
}

TEST_CASE("zero gradient at the minimum is a fixed point") {
    const Task q = quadratic_task();
    LearnerConfig c;
    c.lr = 0.05;
    LearnerState s = init_learner(q, c, 3);
    std::fill(s.params.begin(), s.params.end(), 0.0);
    Batch batch = make_batch(q, 11, 0);
    const StepRaw raw = train_step(s, q, batch);
    for (double p : s.params) CHECK(p == 0.0);
    CHECK(raw.update_norm == 0.0);
    CHECK(raw.loss == 0.0);
}

TEST_CASE("logistic gradient matches finite differences on a hand-built batch") {
    const Task t = logistic_task(3);
    LearnerConfig c;
    c.lr = 0.1;
    LearnerState s = init_learner(t, c, 4);

    Batch batch;
    batch.n = 4;
    batch.dim = 3;
    batch.inputs = {0.5, -1.0, 2.0, 1.5, 0.25, -0.75, -2.0, 1.0, 0.0, 0.1, 0.2, 0.3};
    batch.targets = {1.0, 0.0, 1.0, 0.0};
    batch.splits = {{0, 2}, {2, 2}};

    std::vector<double> analytic;
    batch_loss(t, s, s.params, batch, &analytic);
    const std::vector<double> fd = fd_gradient(t, s, batch);
    CHECK(rel_error(analytic, fd) < 1e-6);
}

TEST_CASE("every learner kind passes the finite-difference oracle") {
    Rng rng(2024);
    const Task tasks[] = {quadratic_task(6, 0.3), logistic_task(5), mlp_task(),
                          bandit_task()};
    for (const Task& task : tasks) {
        for (int rep = 0; rep < 10; ++rep) {
            LearnerConfig c;
            c.lr = 0.1;
            if (task.kind == TaskKind::BanditPolicy && rep % 2 == 0) c.entropy_coef = 0.2;
            LearnerState s = init_learner(task, c, rng.next_u64());
            for (double& p : s.params) p = rng.uniform(-1.5, 1.5);
            s.entropy_coef = c.entropy_coef;
            const Batch batch = make_batch(task, rng.next_u64(), rep);
            std::vector<double> analytic;
            batch_loss(task, s, s.params, batch, &analytic);
            const std::vector<double> fd = fd_gradient(task, s, batch);
            CHECK(rel_error(analytic, fd) < 1e-5);
        }
    }
}

TEST_CASE("aggregated gradient is the sample-weighted mean of sub-gradients") {
    const Task t = mlp_task();
    LearnerConfig c;
    c.lr = 0.1;
    LearnerState s = init_learner(t, c, 12);
    Batch batch = make_batch(t, 13, 0);
    StepRaw raw = train_step(s, t, batch);
    std::vector<double> combined(raw.grad.size(), 0.0);
    for (std::size_t k = 0; k < raw.sub_grads.size(); ++k) {
        const double w = static_cast<double>(batch.splits[k].second) / batch.n;
        for (std::size_t j = 0; j < combined.size(); ++j) combined[j] += w * raw.sub_grads[k][j];
    }
    CHECK(rel_error(combined, raw.grad) < 1e-12);
}

TEST_CASE("full runs are bitwise reproducible") {
    const Task t = mlp_task();
    LearnerConfig c;
    c.opt = OptKind::Adam;
    c.lr = 0.01;
    LearnerState a = init_learner(t, c, 21);
    LearnerState b = init_learner(t, c, 21);
    for (std::uint64_t step = 0; step < 50; ++step) {
        const StepRaw ra = train_step(a, t, make_batch(t, 21, step));
        const StepRaw rb = train_step(b, t, make_batch(t, 21, step));
        REQUIRE(ra.loss == rb.loss);
        REQUIRE(ra.update_norm == rb.update_norm);
        REQUIRE(ra.grad == rb.grad);
    }
    CHECK(a == b);
}

TEST_CASE("transition purity: checkpoint replay reproduces the trajectory") {
    const Task t = logistic_task();
    LearnerConfig c;
    c.opt = OptKind::Momentum;
    c.lr = 0.05;
    LearnerState s = init_learner(t, c, 33);
    for (std::uint64_t step = 0; step < 7; ++step) train_step(s, t, make_batch(t, 33, step));

    LearnerState restored = restore_state(serialize_state(s));
    REQUIRE(restored == s);
    for (std::uint64_t step = 7; step < 14; ++step) {
        train_step(s, t, make_batch(t, 33, step));
        train_step(restored, t, make_batch(t, 33, step));
    }
    CHECK(restored == s);
}

TEST_CASE("checkpoint bytes are stable and guard against truncation") {
    const Task t = quadratic_task();
    LearnerConfig c;
    c.lr = 0.05;
    const LearnerState s = init_learner(t, c, 9);
    const auto bytes = serialize_state(s);
    CHECK(bytes == serialize_state(s));

    auto truncated = bytes;
    truncated.resize(truncated.size() / 2);
    CHECK_THROWS_AS(restore_state(truncated), CheckpointError);
    auto corrupted = bytes;
    corrupted[corrupted.size() / 2] ^= 0xff;
    CHECK_THROWS_AS(restore_state(corrupted), CheckpointError);
}

TEST_CASE("evaluate: exact bandit expectation and quadratic minimum") {
    const Task b = bandit_task({1.0, 0.0, 0.0});
    LearnerConfig c;
    c.lr = 0.1;
    const LearnerState s = init_learner(b, c, 2);  // zero logits: uniform policy
    CHECK(evaluate(s, b, 123) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const Task q = quadratic_task();
    LearnerState sq = init_learner(q, c, 2);
    std::fill(sq.params.begin(), sq.params.end(), 0.0);
    CHECK(evaluate(sq, q, 5) == 0.0);

    const Task l = logistic_task();
    const LearnerState sl = init_learner(l, c, 2);
    CHECK(evaluate(sl, l, 77) == evaluate(sl, l, 77));
    CHECK(evaluate(sl, l, 77) != evaluate(sl, l, 78));
}

TEST_CASE("divergence flags the state and blocks further stepping") {
    Task q = quadratic_task(4);
    q.data.eigs = {100.0, 200.0, 300.0, 400.0};
    LearnerConfig c;
    c.lr = 1.0;  // far beyond 2/L: guaranteed blow-up
    LearnerState s = init_learner(q, c, 1);
    bool diverged = false;
    for (std::uint64_t step = 0; step < 2000 && !diverged; ++step)
        diverged = train_step(s, q, make_batch(q, 1, step)).diverged;
    REQUIRE(diverged);
    CHECK(s.diverged);
    CHECK(evaluate(s, q, 0) == kDivergedPerformance);
    CHECK_THROWS_AS(train_step(s, q, make_batch(q, 1, 0)), ContractError);
}

TEST_CASE("quadratic stability boundary under a transient rate spike") {
    const Task q = quadratic_task();  // spectrum [0.8, 5.0], L = 5
    LearnerConfig c;
    c.lr = 0.3;  // lr < 2/L = 0.4 < 10 lr
    LearnerState s = init_learner(q, c, 17);
    double prev = norm2(s.params);
    for (std::uint64_t step = 0; step < 40; ++step) {
        train_step(s, q, make_batch(q, 17, step));
        const double now = norm2(s.params);
        CHECK(now < prev);  // every mode contracts below the boundary
        prev = now;
    }
    s.lr = 3.0;  // 10x spike: every mode now expands
    for (std::uint64_t step = 40; step < 50; ++step) {
        train_step(s, q, make_batch(q, 17, step));
        const double now = norm2(s.params);
        CHECK(now > prev);
        prev = now;
    }
}

TEST_CASE("gradient clipping caps the update norm") {
    Task q = quadratic_task();
    LearnerConfig c;
    c.lr = 0.1;
    c.clip_norm = 1.0;
    LearnerState s = init_learner(q, c, 30);
    for (double& p : s.params) p *= 100.0;  // force a large gradient
    const StepRaw raw = train_step(s, q, make_batch(q, 30, 0));
    CHECK(norm2(raw.grad) > 1.0);  // raw gradient logged unclipped
    CHECK(raw.update_norm <= 0.1 * 1.0 + 1e-12);
}

TEST_CASE("entropy regularization keeps the policy away from greedy collapse") {
    const Task b = bandit_task({1.0, 0.5, 0.0});
    LearnerConfig reg;
    reg.lr = 0.5;
    reg.entropy_coef = 0.2;
    LearnerConfig greedy;
    greedy.lr = 0.5;

    LearnerState sr = init_learner(b, reg, 41);
    LearnerState sg = init_learner(b, greedy, 41);
    double entropy_reg = 0.0, entropy_greedy = 0.0;
    for (std::uint64_t step = 0; step < 4000; ++step) {
        entropy_reg = train_step(sr, b, make_batch(b, 41, step)).entropy;
        entropy_greedy = train_step(sg, b, make_batch(b, 41, step)).entropy;
    }
    // Regularized stationary point is softmax(mu / c): entropy stays bounded
    // away from zero, while the unregularized policy keeps sharpening.
    CHECK(entropy_reg > 0.15);
    CHECK(entropy_greedy < entropy_reg / 2.0);
}
