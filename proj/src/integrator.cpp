#include "qtorhc/integrator.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "qtorhc/errors.hpp"

namespace qtorhc {

ControlSignal::ControlSignal(double t0, double horizon, Matrix values)
    : t0_(t0), horizon_(horizon), values_(std::move(values)) {
  if (!(horizon_ > 0.0)) throw Error("control signal: horizon must be positive");
  if (values_.cols() < 1 || values_.rows() < 1) {
    throw DimensionError("control signal: need at least one segment");
  }
}

ControlSignal ControlSignal::constant(double t0, double horizon, int segments, const Vector& u) {
  return ControlSignal(t0, horizon, u.replicate(1, segments));
}

int ControlSignal::segment_at(double t) const {
  const auto j = static_cast<int>(std::floor((t - t0_) / segment_length()));
  return std::clamp(j, 0, segments() - 1);
}

ControlSignal ControlSignal::clamped(const ControlBounds& bounds) const {
  Matrix v = values_;
  for (int j = 0; j < v.cols(); ++j) {
    v.col(j) = v.col(j).cwiseMax(bounds.lower()).cwiseMin(bounds.upper());
  }
  return ControlSignal(t0_, horizon_, std::move(v));
}

namespace {

struct Rk4Workspace {
  Vector k1, k2, k3, k4, tmp;
  explicit Rk4Workspace(int n) : k1(n), k2(n), k3(n), k4(n), tmp(n) {}
};

void rk4_step(const ControlModel& model, const Vector& x, const Vector& u, double h,
              Rk4Workspace& w, Vector& out) {
  model.eval_unchecked(x, u, w.k1);
  w.tmp = x + 0.5 * h * w.k1;
  model.eval_unchecked(w.tmp, u, w.k2);
  w.tmp = x + 0.5 * h * w.k2;
  model.eval_unchecked(w.tmp, u, w.k3);
  w.tmp = x + h * w.k3;
  model.eval_unchecked(w.tmp, u, w.k4);
  out = x + (h / 6.0) * (w.k1 + 2.0 * w.k2 + 2.0 * w.k3 + w.k4);
}

int even_steps(double length, double h) {
  int steps = static_cast<int>(std::ceil(length / h - 1e-9));
  steps = std::max(steps, 2);
  if (steps % 2 != 0) ++steps;
  return steps;
}

double quadratic_form(const Matrix& M, const Vector& v) { return v.dot(M * v); }

// Composite rule over `count` equal intervals of width dx.
double composite(const std::vector<double>& f, double dx) {
  const std::size_t count = f.size() - 1;
  if (count == 0) return 0.0;
  if (count == 1) return 0.5 * dx * (f[0] + f[1]);
  std::size_t simpson_end = count;
  double total = 0.0;
  if (count % 2 != 0) {
    simpson_end = count - 3;
    total += 3.0 * dx / 8.0 *
             (f[simpson_end] + 3.0 * f[simpson_end + 1] + 3.0 * f[simpson_end + 2] + f[count]);
  }
  for (std::size_t i = 0; i + 2 <= simpson_end; i += 2) {
    total += dx / 3.0 * (f[i] + 4.0 * f[i + 1] + f[i + 2]);
  }
  return total;
}

std::size_t find_node(const std::vector<double>& times, double t) {
  const double tol = 1e-9 * std::max(1.0, std::abs(t));
  auto it = std::lower_bound(times.begin(), times.end(), t - tol);
  if (it == times.end() || std::abs(*it - t) > tol) {
    std::ostringstream msg;
    msg << "running_cost: t = " << t << " is not a node of the trajectory grid ["
        << times.front() << ", " << times.back() << "]";
    throw Error(msg.str());
  }
  return static_cast<std::size_t>(it - times.begin());
}

}  // namespace

Trajectory integrate(const ControlModel& model, const Vector& x0, const ControlSignal& signal,
                     double h, std::optional<double> t_end) {
  if (!(h > 0.0)) throw Error("integrate: step size must be positive");
  if (x0.size() != model.state_dim() || signal.dim() != model.control_dim()) {
    throw DimensionError("integrate: initial state or control signal has wrong dimension");
  }
  const double stop = t_end.value_or(signal.end());
  if (!(stop > signal.t0()) || stop > signal.end() + 1e-12) {
    throw Error("integrate: t_end must lie in (t0, t0 + T]");
  }

  Trajectory traj;
  traj.times.push_back(signal.t0());
  traj.states.push_back(x0);
  Rk4Workspace work(model.state_dim());
  Vector x = x0;
  Vector next(model.state_dim());
  Vector u(model.control_dim());

  for (int j = 0; j < signal.segments(); ++j) {
    const double s = signal.segment_start(j);
    const double e = (j + 1 == signal.segments()) ? std::min(signal.end(), stop)
                                                  : std::min(signal.segment_start(j + 1), stop);
    if (e <= s + 1e-14) break;
    const int steps = even_steps(e - s, h);
    const double dt = (e - s) / steps;
    u = signal.values().col(j);
    for (int k = 0; k < steps; ++k) {
      rk4_step(model, x, u, dt, work, next);
      const double t = (k + 1 == steps) ? e : s + (k + 1) * dt;
      if (!next.allFinite()) {
        std::ostringstream msg;
        msg << model.name() << ": integration diverged at t = " << t;
        throw IntegrationDiverged(t, msg.str());
      }
      x = next;
      traj.times.push_back(t);
      traj.states.push_back(x);
      traj.step_segment.push_back(j);
    }
    if (e >= stop) break;
  }
  return traj;
}

double running_cost(const Matrix& W, const Matrix& R, const Trajectory& traj,
                    const ControlSignal& signal, double a, double b) {
  if (traj.times.size() < 2) return 0.0;
  if (a > b) throw Error("running_cost: need a <= b");
  if (a < traj.start() - 1e-9 || b > traj.end() + 1e-9) {
    throw Error("running_cost: interval outside trajectory span");
  }
  const std::size_t ia = find_node(traj.times, a);
  const std::size_t ib = find_node(traj.times, b);

  double total = 0.0;
  std::vector<double> values;
  std::size_t k = ia;
  while (k < ib) {
    const int seg = traj.step_segment[k];
    std::size_t end = k;
    while (end < ib && traj.step_segment[end] == seg) ++end;
    const Vector u = signal.value(seg);
    const double uRu = quadratic_form(R, u);
    values.clear();
    for (std::size_t i = k; i <= end; ++i) {
      values.push_back(quadratic_form(W, traj.states[i]) + uRu);
    }
    const double dx = (traj.times[end] - traj.times[k]) / static_cast<double>(end - k);
    total += composite(values, dx);
    k = end;
  }
  return total;
}

FeedbackTrajectory simulate_feedback(const ControlModel& model, const Vector& x0,
                                     const Policy& policy, double t0, double duration, double h) {
  if (!(h > 0.0) || !(duration > 0.0)) throw Error("simulate_feedback: need h > 0, duration > 0");
  if (x0.size() != model.state_dim()) throw DimensionError("simulate_feedback: bad x0");
  const int steps = even_steps(duration, h);
  const double dt = duration / steps;
  const int n = model.state_dim();

  FeedbackTrajectory traj;
  traj.times.reserve(steps + 1);
  Vector x = x0;
  Vector k1(n), k2(n), k3(n), k4(n), tmp(n);
  for (int k = 0; k <= steps; ++k) {
    const Vector u = policy(x);
    traj.times.push_back(k == steps ? t0 + duration : t0 + k * dt);
    traj.states.push_back(x);
    traj.controls.push_back(u);
    if (k == steps) break;
    model.eval_unchecked(x, u, k1);
    tmp = x + 0.5 * dt * k1;
    model.eval_unchecked(tmp, policy(tmp), k2);
    tmp = x + 0.5 * dt * k2;
    model.eval_unchecked(tmp, policy(tmp), k3);
    tmp = x + dt * k3;
    model.eval_unchecked(tmp, policy(tmp), k4);
    x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!x.allFinite()) {
      const double t = t0 + (k + 1) * dt;
      std::ostringstream msg;
      msg << model.name() << ": closed-loop simulation diverged at t = " << t;
      throw IntegrationDiverged(t, msg.str());
    }
  }
  return traj;
}

double running_cost(const Matrix& W, const Matrix& R, const FeedbackTrajectory& traj) {
  if (traj.times.size() < 2) return 0.0;
  std::vector<double> values;
  values.reserve(traj.times.size());
  for (std::size_t i = 0; i < traj.times.size(); ++i) {
    values.push_back(quadratic_form(W, traj.states[i]) + quadratic_form(R, traj.controls[i]));
  }
  const double dx = (traj.times.back() - traj.times.front()) /
                    static_cast<double>(traj.times.size() - 1);
  return composite(values, dx);
}

GrowthConstants growth_constants(const ControlModel& model, const Matrix& H, double alpha,
                                 int n_samples, unsigned long long seed) {
  const int n = model.state_dim();
  const int m = model.control_dim();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(H);
  if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() <= 0.0) {
    throw Error("growth_constants: H must be symmetric positive definite");
  }
  GrowthConstants c;
  c.M1 = std::sqrt(alpha / eig.eigenvalues().minCoeff());

  // Candidate controls: every vertex of the box, plus zero.
  std::vector<Vector> controls{Vector::Zero(m)};
  for (int mask = 0; mask < (1 << m); ++mask) {
    Vector w(m);
    for (int i = 0; i < m; ++i) {
      w[i] = (mask >> i) & 1 ? model.bounds().upper()[i] : model.bounds().lower()[i];
    }
    controls.push_back(w);
  }

  const Matrix L = Eigen::LLT<Matrix>(H).matrixU();  // H = L'L
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double sup_f = 0.0;
  Vector z(n), dx(n);
  for (int s = 0; s < 2 * n_samples; ++s) {
    for (int i = 0; i < n; ++i) z[i] = gauss(rng);
    z.normalize();
    const double radius = s < n_samples ? 1.0 : std::pow(unit(rng), 1.0 / n);
    const Vector x = L.triangularView<Eigen::Upper>().solve(std::sqrt(alpha) * radius * z);
    for (const auto& w : controls) {
      model.eval_unchecked(x, w, dx);
      sup_f = std::max(sup_f, dx.norm());
    }
  }
  c.M2 = model.lipschitz() * c.M1 + sup_f;
  return c;
}

GrowthReport growth_bound_check(const ControlModel& model, const Trajectory& traj,
                                double horizon, double M1, double M2) {
  GrowthReport r;
  for (const auto& x : traj.states) r.max_norm = std::max(r.max_norm, x.norm());
  r.bound = (M1 + M2 * horizon) * std::exp(model.lipschitz() * horizon);
  r.violated = r.max_norm > r.bound;
  return r;
}

}  // namespace qtorhc
