#include "netren/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace netren {

void LossConfig::validate(int n, int m) const {
  if (Q.rows() != n + m || Q.cols() != n + m) {
    throw DimensionError("Q is " + std::to_string(Q.rows()) + "x" + std::to_string(Q.cols()) + ", expected " +
                         std::to_string(n + m) + "x" + std::to_string(n + m));
  }
  if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > kSymmetryTol * std::max(1.0, Q.norm())) {
    throw std::invalid_argument("Q must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Mat> eig(Q, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, Q.norm())) {
    throw std::invalid_argument("Q must be positive semidefinite");
  }
  if (position_index.size() != position_offset.size()) {
    throw DimensionError("position_index and position_offset differ in length");
  }
  for (int idx : position_index) {
    if (idx < 0 || idx + 1 >= n) throw DimensionError("position index outside the state vector");
  }
  if (!(barrier_eps > 0.0)) throw std::invalid_argument("barrier_eps must be positive");
  for (const auto& ob : obstacles) {
    if (!positive_definite(ob.shape)) throw std::invalid_argument("obstacle shape matrix must be positive definite");
  }
  const int agents = static_cast<int>(position_index.size());
  for (const auto& f : formation) {
    if (f.i < 0 || f.j < 0 || f.i >= agents || f.j >= agents || f.i == f.j) {
      throw std::invalid_argument("formation link references an unknown agent");
    }
  }
}

LossConfig vehicle_loss(const VehiclePlant& plant, Mat Q) {
  LossConfig cfg;
  cfg.Q = std::move(Q);
  for (int i = 0; i < plant.num_agents(); ++i) {
    cfg.position_index.push_back(plant.state_offset(i));
    cfg.position_offset.push_back(plant.equilibrium()[static_cast<std::size_t>(i)]);
  }
  return cfg;
}

namespace {

Vec2 position_of(const LossConfig& cfg, const Vec& x, std::size_t i) {
  return x.segment<2>(cfg.position_index[i]) + cfg.position_offset[i];
}

// Evaluates the stage cost; gradients are added when gx/gu are non-null.
StageLossTerms evaluate(const LossConfig& cfg, const Vec& x, const Vec& u, Vec* gx, Vec* gu) {
  StageLossTerms terms;
  const Eigen::Index n = x.size();
  Vec xu(n + u.size());
  xu << x, u;
  const Vec Qxu = cfg.Q * xu;
  terms.trajectory = xu.dot(Qxu);
  if (gx) {
    const Vec g = cfg.Q * xu + cfg.Q.transpose() * xu;
    *gx += g.head(n);
    *gu += g.tail(u.size());
  }

  const std::size_t agents = cfg.position_index.size();
  if (agents == 0) return terms;
  std::vector<Vec2> pos(agents);
  for (std::size_t i = 0; i < agents; ++i) pos[i] = position_of(cfg, x, i);
  auto add_pos_grad = [&](std::size_t i, const Vec2& g) {
    if (gx) gx->segment<2>(cfg.position_index[i]) += g;
  };

  if (cfg.collision_weight > 0.0) {
    for (std::size_t i = 0; i < agents; ++i) {
      for (std::size_t j = i + 1; j < agents; ++j) {
        const Vec2 d = pos[i] - pos[j];
        const double dist = d.norm();
        const double gap = cfg.collision_distance - dist;
        if (gap <= 0.0) continue;
        const double den = dist + cfg.barrier_eps;
        terms.collision += cfg.collision_weight * gap * gap / den;
        if (gx && dist > kCoincidentDistance) {
          const double ddist = cfg.collision_weight * (-2.0 * gap * den - gap * gap) / (den * den);
          const Vec2 g = ddist * d / dist;
          add_pos_grad(i, g);
          add_pos_grad(j, -g);
        }
      }
    }
  }

  if (cfg.obstacle_weight > 0.0) {
    for (const Obstacle& ob : cfg.obstacles) {
      const Eigen::Matrix2d inv = ob.shape.inverse();
      for (std::size_t i = 0; i < agents; ++i) {
        const Vec2 d = pos[i] - ob.center;
        const Vec2 Sd = inv * d;
        const double depth = 1.0 - d.dot(Sd);
        if (depth <= 0.0) continue;
        terms.obstacle += cfg.obstacle_weight * depth * depth;
        add_pos_grad(i, cfg.obstacle_weight * 2.0 * depth * -(inv + inv.transpose()) * d);
      }
    }
  }

  if (cfg.formation_weight > 0.0) {
    for (const FormationLink& f : cfg.formation) {
      const auto i = static_cast<std::size_t>(f.i), j = static_cast<std::size_t>(f.j);
      const Vec2 d = pos[i] - pos[j];
      const double dist = d.norm();
      const double err = dist - f.distance;
      terms.formation += cfg.formation_weight * err * err;
      if (gx && dist > kCoincidentDistance) {
        const Vec2 g = cfg.formation_weight * 2.0 * err * d / dist;
        add_pos_grad(i, g);
        add_pos_grad(j, -g);
      }
    }
  }
  return terms;
}

}  // namespace

StageLossTerms stage_loss_terms(const LossConfig& cfg, const Vec& x, const Vec& u) {
  return evaluate(cfg, x, u, nullptr, nullptr);
}

double stage_loss(const LossConfig& cfg, const Vec& x, const Vec& u) {
  return evaluate(cfg, x, u, nullptr, nullptr).total();
}

double stage_loss_grad(const LossConfig& cfg, const Vec& x, const Vec& u, Vec& gx, Vec& gu) {
  return evaluate(cfg, x, u, &gx, &gu).total();
}

TrainingProblem::TrainingProblem(const Plant& p, InterconnectionSpec s, ControllerArch a, LossConfig l, int T)
    : plant(&p), spec(std::move(s)), arch(a), loss(std::move(l)), horizon(T) {
  require_valid(spec);
  sets = compute_index_sets(spec);
  if (T < 1) throw std::invalid_argument("horizon must be at least 1");
  if (spec.total_n() != p.total_state() || spec.total_m() != p.total_input()) {
    throw DimensionError("interconnection and plant dimensions differ");
  }
  loss.validate(p.total_state(), p.total_input());
  for (const AgentDims& d : spec.agents) arch.cell(d).validate();
}

TrainableParams init_params(const TrainingProblem& problem, double gamma_R, std::mt19937_64& rng, double theta_std) {
  std::normal_distribution<double> normal(0.0, 1.0);
  TrainableParams p;
  p.gamma_R = gamma_R;
  for (const AgentDims& d : problem.spec.agents) {
    Vec th(static_cast<Eigen::Index>(problem.arch.cell(d).param_count()));
    for (Eigen::Index k = 0; k < th.size(); ++k) th(k) = theta_std * normal(rng);
    p.theta.push_back(std::move(th));
  }
  p.b.resize(problem.spec.num_agents());
  for (Eigen::Index k = 0; k < p.b.size(); ++k) p.b(k) = normal(rng);
  return p;
}

ControllerNetwork make_controller(const TrainingProblem& problem, const TrainableParams& params) {
  const int N = problem.spec.num_agents();
  if (static_cast<int>(params.theta.size()) != N || params.b.size() != N) {
    throw DimensionError("parameters do not match the number of agents");
  }
  ControllerNetwork net;
  net.spec = problem.spec;
  net.activation = problem.arch.activation;
  net.gains = allocate_gains(problem.spec, problem.sets, params.b, params.gamma_R);
  for (int i = 0; i < N; ++i) {
    const auto si = static_cast<std::size_t>(i);
    net.cells.push_back(
        build_ren({params.theta[si], net.gains.gamma(i)}, problem.arch.cell(problem.spec.agents[si])));
  }
  return net;
}

int worker_threads() {
  if (const char* env = std::getenv("NETREN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

namespace {

template <typename Fn>
void for_each_sample(std::size_t count, Fn&& fn) {
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(worker_threads()), count);
  if (threads <= 1) {
    for (std::size_t s = 0; s < count; ++s) fn(s);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t s = w; s < count; s += threads) fn(s);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

DivergenceError tag_sample(const DivergenceError& e, int sample) {
  return DivergenceError(std::string(e.what()) + " (sample " + std::to_string(sample) + ")", e.time, e.epoch, sample);
}

struct SampleGradient {
  double loss = 0.0;
  std::vector<RenMatrices> cell_bar;
};

SampleGradient sample_gradient(const TrainingProblem& problem, const ControllerNetwork& net,
                               const std::vector<Vec>& noise) {
  const Plant& plant = *problem.plant;
  const InterconnectionSpec& spec = problem.spec;
  const int N = spec.num_agents(), T = problem.horizon;
  RolloutTape tape;
  const RolloutRecord rec = closed_loop_rollout(plant, net, noise, T, &tape);

  SampleGradient out;
  // Plant adjoint: x_{t+1} = f(x_t, u_t) + w_{t+1}.
  std::vector<Vec> u_bar(static_cast<std::size_t>(T) + 1);
  Vec x_bar_next = Vec::Zero(plant.total_state());
  for (int t = T; t >= 0; --t) {
    const auto st = static_cast<std::size_t>(t);
    Vec gx = Vec::Zero(plant.total_state());
    Vec gu = Vec::Zero(plant.total_input());
    out.loss += stage_loss_grad(problem.loss, rec.x[st], rec.u[st], gx, gu);
    if (t < T) plant.dynamics_vjp(rec.x[st], rec.u[st], x_bar_next, gx, gu);
    x_bar_next = std::move(gx);
    u_bar[st] = std::move(gu);
  }

  // Controller adjoint, all agents together because of the delayed coupling.
  for (int i = 0; i < N; ++i) {
    out.cell_bar.push_back(RenMatrices::zeros(net.cells[static_cast<std::size_t>(i)].dims()));
  }
  std::vector<Vec> xi_bar;
  for (const RenMatrices& c : net.cells) xi_bar.push_back(Vec::Zero(c.A1.rows()));
  Vec v_bar_next = Vec::Zero(spec.total_q());
  for (int t = T; t >= 0; --t) {
    const auto st = static_cast<std::size_t>(t);
    const Vec z_bar = spec.M_uz.transpose() * u_bar[st] + spec.M_vz.transpose() * v_bar_next;
    Vec v_bar(spec.total_q());
    for (int i = 0; i < N; ++i) {
      const auto si = static_cast<std::size_t>(i);
      const AgentDims& d = spec.agents[si];
      const RenState xi_prev{t > 0 ? rec.xi[st - 1][si] : Vec::Zero(net.cells[si].A1.rows())};
      const RenStepAdjoint adj =
          ren_step_vjp(net.cells[si], xi_prev, rec.v[st].segment(spec.q_offset(i), d.q), tape.steps[st][si],
                       net.activation, xi_bar[si], z_bar.segment(spec.r_offset(i), d.r), out.cell_bar[si]);
      xi_bar[si] = adj.xi_prev;
      v_bar.segment(spec.q_offset(i), d.q) = adj.v;
    }
    v_bar_next = std::move(v_bar);
  }
  return out;
}

}  // namespace

double rollout_loss(const TrainingProblem& problem, const ControllerNetwork& net,
                    const std::vector<std::vector<Vec>>& samples) {
  if (samples.empty()) throw std::invalid_argument("the empirical loss needs at least one sample");
  std::vector<double> per(samples.size(), 0.0);
  for_each_sample(samples.size(), [&](std::size_t s) {
    try {
      const RolloutRecord rec = closed_loop_rollout(*problem.plant, net, samples[s], problem.horizon);
      double acc = 0.0;
      for (std::size_t t = 0; t < rec.x.size(); ++t) acc += stage_loss(problem.loss, rec.x[t], rec.u[t]);
      per[s] = acc;
    } catch (const DivergenceError& e) {
      throw tag_sample(e, static_cast<int>(s));
    }
  });
  double total = 0.0;
  for (double v : per) total += v;
  return total / static_cast<double>(samples.size());
}

double empirical_loss(const TrainingProblem& problem, const TrainableParams& params,
                      const std::vector<std::vector<Vec>>& samples) {
  return rollout_loss(problem, make_controller(problem, params), samples);
}

ControllerGradient controller_gradient(const TrainingProblem& problem, const ControllerNetwork& net,
                                       const std::vector<std::vector<Vec>>& samples) {
  if (samples.empty()) throw std::invalid_argument("the empirical loss needs at least one sample");
  const int N = problem.spec.num_agents();
  std::vector<SampleGradient> per(samples.size());
  for_each_sample(samples.size(), [&](std::size_t s) {
    try {
      per[s] = sample_gradient(problem, net, samples[s]);
    } catch (const DivergenceError& e) {
      throw tag_sample(e, static_cast<int>(s));
    }
  });

  // Summed in sample order so the result does not depend on the thread count.
  ControllerGradient g;
  for (int i = 0; i < N; ++i) g.cells.push_back(RenMatrices::zeros(net.cells[static_cast<std::size_t>(i)].dims()));
  for (const SampleGradient& sg : per) {
    g.loss += sg.loss;
    for (int i = 0; i < N; ++i) g.cells[static_cast<std::size_t>(i)] += sg.cell_bar[static_cast<std::size_t>(i)];
  }
  const double scale = 1.0 / static_cast<double>(samples.size());
  g.loss *= scale;
  for (RenMatrices& bar : g.cells) {
    for (Mat* m : {&bar.A1, &bar.B1, &bar.B2, &bar.C1, &bar.D11, &bar.D12, &bar.C2, &bar.D21, &bar.D22}) *m *= scale;
  }
  return g;
}

GradientRecord grad_params(const TrainingProblem& problem, const TrainableParams& params,
                           const std::vector<std::vector<Vec>>& samples) {
  const ControllerNetwork net = make_controller(problem, params);
  const ControllerGradient cg = controller_gradient(problem, net, samples);
  const int N = problem.spec.num_agents();

  GradientRecord g;
  g.loss = cg.loss;
  g.rollouts = static_cast<int>(samples.size());
  g.tape_steps = samples.size() * static_cast<std::size_t>(problem.horizon + 1) * static_cast<std::size_t>(N);
  const Vec dgamma_db = gain_sensitivity(net.gains);
  const Vec dgamma_dR = gain_sensitivity_gamma_R(net.gains);
  g.b = Vec::Zero(N);
  for (int i = 0; i < N; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const RenGradient rg =
        build_ren_vjp({params.theta[si], net.gains.gamma(i)}, problem.arch.cell(problem.spec.agents[si]), cg.cells[si]);
    g.theta.push_back(rg.theta);
    g.b(i) = rg.gamma * dgamma_db(i);
    g.gamma_R += rg.gamma * dgamma_dR(i);
  }
  return g;
}

Optimizer parse_optimizer(const std::string& name) {
  if (name == "gd" || name == "sgd") return Optimizer::GradientDescent;
  if (name == "momentum") return Optimizer::Momentum;
  if (name == "adam") return Optimizer::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected gd, momentum or adam)");
}

std::string to_string(Optimizer opt) {
  switch (opt) {
    case Optimizer::GradientDescent:
      return "gd";
    case Optimizer::Momentum:
      return "momentum";
    case Optimizer::Adam:
      return "adam";
  }
  return "?";
}

void TrainingConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
  if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  if (samples < 1) throw std::invalid_argument("need at least one sample");
  if (horizon < 1) throw std::invalid_argument("horizon must be at least 1");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint interval must be non-negative");
}

std::vector<std::vector<Vec>> draw_samples(const NoiseModel& noise, int count, std::mt19937_64& rng) {
  std::vector<std::vector<Vec>> out;
  for (int s = 0; s < count; ++s) out.push_back(noise.sample(rng));
  return out;
}

namespace {

void descend(const TrainingConfig& cfg, OptimizerState& opt, TrainableParams& p, const GradientRecord& g) {
  const double lr = cfg.learning_rate;
  const std::size_t N = p.theta.size();
  if (opt.theta_m.size() != N) {
    opt.theta_m.clear();
    opt.theta_v.clear();
    for (const Vec& th : p.theta) {
      opt.theta_m.push_back(Vec::Zero(th.size()));
      opt.theta_v.push_back(Vec::Zero(th.size()));
    }
    opt.b_m = Vec::Zero(p.b.size());
    opt.b_v = Vec::Zero(p.b.size());
  }
  ++opt.steps;
  auto update = [&](Vec& x, const Vec& grad, Vec& m, Vec& v) {
    switch (cfg.optimizer) {
      case Optimizer::GradientDescent:
        x -= lr * grad;
        break;
      case Optimizer::Momentum:
        m = cfg.momentum * m + grad;
        x -= lr * m;
        break;
      case Optimizer::Adam: {
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(opt.steps));
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(opt.steps));
        x.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_eps);
        break;
      }
    }
  };
  for (std::size_t i = 0; i < N; ++i) update(p.theta[i], g.theta[i], opt.theta_m[i], opt.theta_v[i]);
  update(p.b, g.b, opt.b_m, opt.b_v);
  if (cfg.train_gamma_R) {
    Vec log_r(1), log_r_grad(1);
    log_r(0) = std::log(p.gamma_R);
    log_r_grad(0) = p.gamma_R * g.gamma_R;
    update(log_r, log_r_grad, opt.log_gamma_R_m, opt.log_gamma_R_v);
    p.gamma_R = std::exp(log_r(0));
  }
}

std::string save_rng(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

TrainState train(const TrainingProblem& problem, const TrainingConfig& cfg, const NoiseModel& noise, TrainState state,
                 const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.horizon != problem.horizon) throw std::invalid_argument("training horizon differs from the problem horizon");

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::vector<Vec>> samples = draw_samples(noise, cfg.samples, rng);
  if (cfg.resample && !state.rng_state.empty()) {
    std::istringstream is(state.rng_state);
    is >> rng;
  }

  for (int epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.resample && epoch > 1) samples = draw_samples(noise, cfg.samples, rng);

    GradientRecord g;
    try {
      g = grad_params(problem, state.params, samples);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " in epoch " + std::to_string(epoch), e.time, epoch, e.sample);
    }
    const GainAllocation gains = allocate_gains(problem.spec, problem.sets, state.params.b, state.params.gamma_R);
    if (cfg.debug_certify) {
      const LmiReport rep = certify(problem.spec, gains);
      state.lmi_history.push_back(rep.max_eigenvalue);
      if (!rep.feasible) {
        throw CertificationError("epoch " + std::to_string(epoch) + ": network certificate violated (max eigenvalue " +
                                     std::to_string(rep.max_eigenvalue) + ")",
                                 epoch, rep.max_eigenvalue);
      }
    }
    state.loss_history.push_back(g.loss);
    state.gain_history.push_back(gains.gamma);

    descend(cfg, state.optimizer, state.params, g);
    state.epoch = epoch;
    state.rng_state = save_rng(rng);
    if (on_epoch) on_epoch(state);
  }
  state.final_loss = empirical_loss(problem, state.params, samples);
  return state;
}

}  // namespace netren
