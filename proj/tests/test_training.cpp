#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>

#include "netren/io.hpp"
#include "netren/training.hpp"
#include "support.hpp"

using namespace netren;
using namespace testing_support;

namespace {

VehicleParams pair_params() {
  VehicleParams p;
  p.sample_time = 0.05;
  p.mass = {1.0, 1.5};
  p.friction = {1.0, 0.5};
  p.k_neighbor = {1.0, 1.0};
  p.k_reference = {1.0, 2.0};
  p.delta = {2.0, 2.0};
  p.reference = {{-1.0, 0.0}, {1.0, 0.0}};
  return p;
}

// Two vehicles on a chain with every loss term switched on and active near
// the rest formation.
struct PairFixture {
  VehiclePlant plant{pair_params(), Topology::chain(2)};
  InterconnectionSpec spec;
  LossConfig loss;
  NoiseModel noise;

  explicit PairFixture(double coupling = 0.3) {
    spec = build_from_topology(plant.topology(), {{4, 2, 0, 2}, {4, 2, 0, 2}}, coupling);
    Vec q(12);
    q << 1, 1, 0.5, 0.5, 2, 2, 0.3, 0.3, 0.1, 0.1, 0.1, 0.1;
    loss = vehicle_loss(plant, q.asDiagonal());
    loss.collision_distance = 2.5;
    loss.collision_weight = 3.0;
    loss.obstacles.push_back({Vec2(0.0, 0.3), Vec2(1.5, 1.0).cwiseAbs2().asDiagonal()});
    loss.obstacle_weight = 2.0;
    loss.formation = {{0, 1, 2.2}};
    loss.formation_weight = 0.5;
    noise.initial_mean = Vec::Zero(8);
    noise.initial_std = Vec::Constant(8, 0.3);
  }

  TrainingProblem problem(int T = 10, int c = 4, int s = 4) const {
    return TrainingProblem(plant, spec, {c, s, Activation::Tanh}, loss, T);
  }
};

std::vector<std::vector<Vec>> samples_for(const NoiseModel& nm, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return draw_samples(nm, count, rng);
}

double central(const std::function<double(double)>& f, double h = 1e-5) { return (f(h) - f(-h)) / (2 * h); }


// Relative agreement, with an absolute floor for the roundoff of a central
// difference on a loss of size `loss` (about eps * loss / h).
bool fd_close(double a, double b, double tol, double loss) {
  return std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b)) + 1e-9 * std::max(1.0, std::abs(loss));
}

}  // namespace

TEST_CASE("stage loss examples") {
  SUBCASE("quadratic term") {
    Mat Q = Mat::Zero(24, 24);
    Q.topLeftCorner(16, 16).setIdentity();
    Q.bottomRightCorner(8, 8) = 0.01 * Mat::Identity(8, 8);
    LossConfig cfg;
    cfg.Q = Q;
    Vec x = Vec::Zero(16);
    x(0) = 1.0;
    CHECK(stage_loss(cfg, x, Vec::Zero(8)) == 1.0);
    CHECK(stage_loss(cfg, Vec::Zero(16), Vec::Zero(8)) == 0.0);
    CHECK(stage_loss(cfg, Vec::Zero(16), Vec::Ones(8)) == doctest::Approx(0.08));
  }

  SUBCASE("origin of the rest formation") {
    const PairFixture fx;
    LossConfig cfg = fx.loss;
    cfg.collision_distance = 1.0;
    cfg.obstacles.clear();
    cfg.formation = {{0, 1, 2.0}};
    const StageLossTerms t = stage_loss_terms(cfg, Vec::Zero(8), Vec::Zero(4));
    CHECK(t.trajectory == 0.0);
    CHECK(t.collision == 0.0);
    CHECK(t.formation == doctest::Approx(0.0));
    CHECK(t.obstacle == 0.0);
  }

  SUBCASE("collision hinge") {
    const PairFixture fx;
    LossConfig cfg = fx.loss;
    cfg.obstacle_weight = 0.0;
    cfg.formation_weight = 0.0;
    cfg.collision_distance = 1.0;
    // Positions are offsets from (-1, 0) and (1, 0).
    Vec x = Vec::Zero(8);
    x(0) = 0.75;
    x(4) = -0.75;  // distance 0.5 = d_min / 2
    CHECK(stage_loss_terms(cfg, x, Vec::Zero(4)).collision ==
          doctest::Approx(3.0 * 0.25 / (0.5 + cfg.barrier_eps)));
    x(0) = 0.0;
    x(4) = 0.0;  // distance 2 = 2 d_min
    CHECK(stage_loss_terms(cfg, x, Vec::Zero(4)).collision == 0.0);
  }

  SUBCASE("obstacle and formation") {
    const PairFixture fx;
    LossConfig cfg = fx.loss;
    cfg.collision_weight = 0.0;
    Vec x = Vec::Zero(8);
    x(0) = 1.0;
    x(1) = 0.3;  // agent 0 at the obstacle centre
    const StageLossTerms t = stage_loss_terms(cfg, x, Vec::Zero(4));
    // Agent 1 at (1, 0) is inside as well.
    const double depth1 = 1.0 - 1.0 / 2.25 - 0.09;
    CHECK(t.obstacle == doctest::Approx(2.0 + 2.0 * depth1 * depth1));
    // Agent 0 at (0, 0.3), agent 1 at (1, 0).
    const double err = std::sqrt(1.09) - 2.2;
    CHECK(t.formation == doctest::Approx(0.5 * err * err));
  }
}

TEST_CASE("stage loss properties") {
  const PairFixture fx;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const Vec x = randn(rng, 8, 1.5), u = randn(rng, 4);
    CHECK(stage_loss(fx.loss, x, u) >= 0.0);
    LossConfig twice = fx.loss;
    twice.Q *= 2.0;
    const double a = stage_loss_terms(fx.loss, x, u).trajectory, b = stage_loss_terms(twice, x, u).trajectory;
    CHECK(b == 2.0 * a);
  }

  // Analytic gradient against central differences.
  for (int trial = 0; trial < 20; ++trial) {
    const Vec x = randn(rng, 8, 0.7), u = randn(rng, 4);
    Vec gx = Vec::Zero(8), gu = Vec::Zero(4);
    const double val = stage_loss_grad(fx.loss, x, u, gx, gu);
    CHECK(val == stage_loss(fx.loss, x, u));
    for (int k = 0; k < 8; ++k) {
      const double fd = central([&](double h) {
        Vec xp = x;
        xp(k) += h;
        return stage_loss(fx.loss, xp, u);
      });
      CHECK(std::abs(gx(k) - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
    for (int k = 0; k < 4; ++k) {
      const double fd = central([&](double h) {
        Vec up = u;
        up(k) += h;
        return stage_loss(fx.loss, x, up);
      });
      CHECK(std::abs(gu(k) - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("loss configuration checks") {
  const PairFixture fx;
  LossConfig cfg = fx.loss;
  CHECK_NOTHROW(cfg.validate(8, 4));
  CHECK_THROWS_AS(cfg.validate(8, 3), DimensionError);
  cfg.Q(0, 1) = 1.0;
  CHECK_THROWS_AS(cfg.validate(8, 4), std::invalid_argument);
  cfg = fx.loss;
  cfg.Q(0, 0) = -1.0;
  CHECK_THROWS_AS(cfg.validate(8, 4), std::invalid_argument);
  cfg = fx.loss;
  cfg.obstacles[0].shape(1, 1) = -1.0;
  CHECK_THROWS_AS(cfg.validate(8, 4), std::invalid_argument);
  cfg = fx.loss;
  cfg.formation.push_back({0, 2, 1.0});
  CHECK_THROWS_AS(cfg.validate(8, 4), std::invalid_argument);
  cfg = fx.loss;
  cfg.barrier_eps = 0.0;
  CHECK_THROWS_AS(cfg.validate(8, 4), std::invalid_argument);
}

TEST_CASE("empirical loss") {
  const PairFixture fx;
  const TrainingProblem prob = fx.problem(15);
  std::mt19937_64 rng(5);
  const TrainableParams p = init_params(prob, 2.0, rng, 0.3);

  const std::vector<std::vector<Vec>> zeros(3, {Vec::Zero(8)});
  const double rest = stage_loss(fx.loss, Vec::Zero(8), Vec::Zero(4));
  CHECK(rest > 0.0);
  CHECK(empirical_loss(prob, p, zeros) == doctest::Approx(16.0 * rest).epsilon(1e-14));

  const auto samples = samples_for(fx.noise, 4, 7);
  const ControllerNetwork net = make_controller(prob, p);
  double mean = 0.0;
  for (const auto& s : samples) {
    const RolloutRecord rec = closed_loop_rollout(fx.plant, net, s, 15);
    double acc = 0.0;
    for (std::size_t t = 0; t < rec.x.size(); ++t) acc += stage_loss(fx.loss, rec.x[t], rec.u[t]);
    CHECK(empirical_loss(prob, p, {s}) == acc);
    mean += acc / 4.0;
  }
  CHECK(empirical_loss(prob, p, samples) == doctest::Approx(mean).epsilon(1e-14));
  CHECK_THROWS_AS(empirical_loss(prob, p, {}), std::invalid_argument);

  // Doubling Q doubles the trajectory contribution.
  PairFixture quad;
  quad.loss.collision_weight = quad.loss.obstacle_weight = quad.loss.formation_weight = 0.0;
  const double l1 = empirical_loss(quad.problem(15), p, samples);
  quad.loss.Q *= 2.0;
  CHECK(empirical_loss(quad.problem(15), p, samples) == doctest::Approx(2.0 * l1).epsilon(1e-13));
}

TEST_CASE("controller gradient matches finite differences") {
  const PairFixture fx;
  const TrainingProblem prob = fx.problem(10);
  std::mt19937_64 rng(11);
  const TrainableParams p = init_params(prob, 2.0, rng, 0.3);
  const auto samples = samples_for(fx.noise, 2, 13);
  const ControllerNetwork net = make_controller(prob, p);
  const ControllerGradient g = controller_gradient(prob, net, samples);
  CHECK(g.loss == doctest::Approx(rollout_loss(prob, net, samples)).epsilon(1e-13));

  int checked = 0;
  for (int i = 0; i < 2; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const std::vector<std::pair<Mat RenMatrices::*, const char*>> fields{
        {&RenMatrices::A1, "A1"}, {&RenMatrices::B1, "B1"},   {&RenMatrices::B2, "B2"},
        {&RenMatrices::C1, "C1"}, {&RenMatrices::D11, "D11"}, {&RenMatrices::D12, "D12"},
        {&RenMatrices::C2, "C2"}, {&RenMatrices::D21, "D21"}, {&RenMatrices::D22, "D22"}};
    for (const auto& [field, name] : fields) {
      const Mat& m = net.cells[si].*field;
      const int r = uniform_int(rng, 0, static_cast<int>(m.rows()) - 1);
      const int c = uniform_int(rng, 0, static_cast<int>(m.cols()) - 1);
      if (&m == &net.cells[si].D11 && c >= r) continue;  // kept strictly lower
      const double fd = central([&](double h) {
        ControllerNetwork q = net;
        (q.cells[si].*field)(r, c) += h;
        return rollout_loss(prob, q, samples);
      });
      INFO(name << "(" << r << "," << c << ") of agent " << i);
      CHECK(fd_close((g.cells[si].*field)(r, c), fd, 1e-5, g.loss));
      ++checked;
    }
  }
  CHECK(checked >= 16);
}

TEST_CASE("full chain gradient matches finite differences") {
  for (double coupling : {0.05, 2.0}) {
    for (double gamma_R : {0.5, 5.0}) {
      const PairFixture fx(coupling);
      const TrainingProblem prob = fx.problem(10);
      std::mt19937_64 rng(17);
      const TrainableParams p = init_params(prob, gamma_R, rng, 0.3);
      const auto samples = samples_for(fx.noise, 2, 19);
      const GradientRecord g = grad_params(prob, p, samples);
      CHECK(g.rollouts == 2);
      CHECK(g.tape_steps == 2u * 11u * 2u);
      CHECK(g.loss == doctest::Approx(empirical_loss(prob, p, samples)).epsilon(1e-13));

      for (int k = 0; k < 20; ++k) {
        const int i = uniform_int(rng, 0, 1);
        const auto si = static_cast<std::size_t>(i);
        const int j = uniform_int(rng, 0, static_cast<int>(p.theta[si].size()) - 1);
        const double fd = central([&](double h) {
          TrainableParams q = p;
          q.theta[si](j) += h;
          return empirical_loss(prob, q, samples);
        });
        INFO("theta[" << i << "](" << j << ") " << g.theta[si](j) << " vs " << fd);
        CHECK(fd_close(g.theta[si](j), fd, 1e-4, g.loss));
      }
      const auto alloc = allocate_gains(prob.spec, prob.sets, p.b, gamma_R);
      for (int i = 0; i < 2; ++i) {
        const double fd = central([&](double h) {
          TrainableParams q = p;
          q.b(i) += h;
          return empirical_loss(prob, q, samples);
        });
        INFO("b(" << i << ") on branch " << to_string(alloc.branch[static_cast<std::size_t>(i)]));
        CHECK(fd_close(g.b(i), fd, 1e-4, g.loss));
        CHECK(g.b(i) != 0.0);
        CHECK((g.b(i) > 0) == (fd > 0));
      }
      const double fd_R = central([&](double h) {
        TrainableParams q = p;
        q.gamma_R += h;
        return empirical_loss(prob, q, samples);
      });
      CHECK(fd_close(g.gamma_R, fd_R, 1e-4, g.loss));
    }
  }
}

TEST_CASE("disconnected agent has zero gradient") {
  // Agent 2 of a chain of three: its outputs feed neither the plant nor
  // any neighbour.
  VehicleParams vp = pair_params();
  vp.mass.push_back(1.0);
  vp.friction.push_back(1.0);
  vp.k_neighbor.push_back(1.0);
  vp.k_reference.push_back(1.0);
  vp.delta.push_back(2.0);
  vp.reference.push_back({3.0, 0.0});
  const VehiclePlant plant(vp, Topology::chain(3));
  InterconnectionSpec spec = build_from_topology(plant.topology(), {{4, 2, 0, 2}, {4, 2, 0, 2}, {4, 2, 0, 2}}, 0.3);
  spec.M_uz.middleCols(spec.r_offset(2), 2).setZero();
  spec.M_vz.middleCols(spec.r_offset(2), 2).setZero();
  require_valid(spec);
  const LossConfig loss = vehicle_loss(plant, Mat::Identity(18, 18));
  const TrainingProblem prob(plant, spec, {3, 3, Activation::Tanh}, loss, 8);
  std::mt19937_64 rng(23);
  const TrainableParams p = init_params(prob, 1.0, rng, 0.3);
  NoiseModel nm{Vec::Zero(12), Vec::Constant(12, 0.4), 1, 0.0};
  const GradientRecord g = grad_params(prob, p, samples_for(nm, 2, 29));
  CHECK(g.theta[2].isZero(0.0));
  CHECK(g.b(2) == 0.0);
  CHECK(g.theta[0].norm() > 0.0);
  CHECK(g.theta[1].norm() > 0.0);
}

TEST_CASE("relu subgradient convention") {
  const PairFixture fx;
  const TrainingProblem prob(fx.plant, fx.spec, {3, 3, Activation::ReLU}, fx.loss, 5);
  std::mt19937_64 rng(31);
  const TrainableParams p = init_params(prob, 1.0, rng, 0.3);
  const GradientRecord g = grad_params(prob, p, samples_for(fx.noise, 2, 37));
  for (const Vec& th : g.theta) CHECK(th.allFinite());
  CHECK(activate_slope(Activation::ReLU, 0.0) == 0.0);
}

TEST_CASE("training loop") {
  const PairFixture fx;
  const TrainingProblem prob = fx.problem(12);
  TrainingConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 6;
  cfg.samples = 3;
  cfg.horizon = 12;
  cfg.seed = 41;
  std::mt19937_64 init_rng(43);
  TrainState start;
  start.params = init_params(prob, 2.0, init_rng, 0.2);

  SUBCASE("no epochs") {
    cfg.epochs = 0;
    const TrainState s = train(prob, cfg, fx.noise, start);
    std::mt19937_64 rng(cfg.seed);
    const auto samples = draw_samples(fx.noise, cfg.samples, rng);
    CHECK(s.loss_history.empty());
    CHECK(s.final_loss == empirical_loss(prob, start.params, samples));
  }

  SUBCASE("zero learning rate") {
    cfg.learning_rate = 0.0;
    const TrainState s = train(prob, cfg, fx.noise, start);
    REQUIRE(s.loss_history.size() == 6);
    for (double l : s.loss_history) CHECK(l == s.loss_history.front());
    for (std::size_t i = 0; i < 2; ++i) CHECK(s.params.theta[i] == start.params.theta[i]);
    CHECK(s.params.b == start.params.b);
  }

  SUBCASE("descent and certification") {
    cfg.debug_certify = true;
    int calls = 0;
    const TrainState s = train(prob, cfg, fx.noise, start, [&](const TrainState& st) {
      ++calls;
      CHECK(st.epoch == calls);
    });
    CHECK(calls == 6);
    CHECK(s.lmi_history.size() == 6);
    for (double e : s.lmi_history) CHECK(e <= 1e-8);
    CHECK(s.gain_history.size() == 6);
    CHECK(s.final_loss < s.loss_history.front());
  }

  SUBCASE("determinism and threads") {
    const TrainState a = train(prob, cfg, fx.noise, start);
    const TrainState b = train(prob, cfg, fx.noise, start);
    CHECK(a.loss_history == b.loss_history);
    ::setenv("NETREN_THREADS", "3", 1);
    CHECK(worker_threads() == 3);
    const TrainState c = train(prob, cfg, fx.noise, start);
    ::unsetenv("NETREN_THREADS");
    CHECK(a.loss_history == c.loss_history);
    for (std::size_t i = 0; i < 2; ++i) CHECK(a.params.theta[i] == c.params.theta[i]);
  }

  SUBCASE("resume is contiguous") {
    for (Optimizer opt : {Optimizer::GradientDescent, Optimizer::Momentum, Optimizer::Adam}) {
      for (bool resample : {false, true}) {
        cfg.optimizer = opt;
        cfg.resample = resample;
        cfg.learning_rate = opt == Optimizer::Adam ? 1e-2 : 1e-3;
        const TrainState full = train(prob, cfg, fx.noise, start);
        TrainingConfig half = cfg;
        half.epochs = 3;
        const TrainState first = train(prob, half, fx.noise, start);
        Checkpoint ck{first, {4, 4, Activation::Tanh}, cfg.seed, "abc"};
        const Checkpoint back = checkpoint_from_json(json::parse(checkpoint_to_json(ck).dump()));
        CHECK(back.config_hash == "abc");
        CHECK(back.state.epoch == 3);
        const TrainState rest = train(prob, cfg, fx.noise, back.state);
        INFO(to_string(opt) << " resample " << resample);
        CHECK(rest.loss_history == full.loss_history);
        CHECK(rest.params.b == full.params.b);
      }
    }
  }

  SUBCASE("trainable gamma_R") {
    // Small gamma_R puts the exogenous bound in charge, so the gains move with it.
    start.params.gamma_R = 0.5;
    cfg.train_gamma_R = true;
    cfg.debug_certify = true;
    const TrainState s = train(prob, cfg, fx.noise, start);
    CHECK(s.params.gamma_R > 0.0);
    CHECK(s.params.gamma_R != start.params.gamma_R);
    cfg.train_gamma_R = false;
    CHECK(train(prob, cfg, fx.noise, start).params.gamma_R == start.params.gamma_R);
  }

  SUBCASE("config checks") {
    cfg.samples = 0;
    CHECK_THROWS_AS(train(prob, cfg, fx.noise, start), std::invalid_argument);
    cfg.samples = 3;
    cfg.horizon = 11;
    CHECK_THROWS_AS(train(prob, cfg, fx.noise, start), std::invalid_argument);
    CHECK_THROWS_AS(parse_optimizer("lbfgs"), std::invalid_argument);
  }
}

TEST_CASE("divergence carries epoch and sample") {
  const Topology topo = Topology::chain(2);
  const LinearPlant plant(topo, {{3.0 * Mat::Identity(1, 1), Mat::Zero(1, 1)}, {Mat::Zero(1, 1), 0.5 * Mat::Identity(1, 1)}},
                          {Mat::Identity(1, 1), Mat::Identity(1, 1)});
  const auto spec = build_from_topology(topo, {{1, 1, 0, 1}, {1, 1, 0, 1}}, 0.1);
  const TrainingProblem prob(plant, spec, {2, 2, Activation::Tanh}, LossConfig{Mat::Identity(4, 4)}, 30);
  TrainingConfig cfg;
  cfg.epochs = 2;
  cfg.samples = 2;
  cfg.horizon = 30;
  NoiseModel nm{Vec::Zero(2), Vec::Ones(2), 1, 0.0};
  std::mt19937_64 rng(47);
  TrainState st;
  st.params = init_params(prob, 1.0, rng);
  try {
    (void)train(prob, cfg, nm, st);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch == 1);
    CHECK(e.sample == 0);
    CHECK(e.time > 0);
  }
}
