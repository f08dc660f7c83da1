#include "qtorhc/ocp.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "qtorhc/errors.hpp"

namespace qtorhc {

void OcpProblem::validate() const {
  const int n = model.state_dim();
  const int m = model.control_dim();
  std::vector<std::string> bad;
  if (x0.size() != n) bad.push_back("x0 has wrong dimension");
  if (W.rows() != n || W.cols() != n) bad.push_back("W must be n x n");
  if (R.rows() != m || R.cols() != m) bad.push_back("R must be m x m");
  if (terminal.H.rows() != n || terminal.K.rows() != m) bad.push_back("terminal data has wrong size");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) bad.push_back("epsilon must lie in [0, 1]");
  if (!(rho >= 1.0)) bad.push_back("rho must be >= 1");
  if (!(delta > 0.0)) bad.push_back("delta must be positive");
  if (!(T_min >= delta)) bad.push_back("T_min must satisfy T_min >= delta > 0");
  if (segments < 1) bad.push_back("segments must be >= 1");
  if (substeps < 2 || substeps % 2 != 0) bad.push_back("substeps must be even and >= 2");
  if (!bad.empty()) throw ConfigError(std::move(bad));
}

namespace {

// Forward/backward sweeps over the scaled grid. States of the most recent
// forward pass are kept so the reverse sweep can reuse them.
class Shooter {
 public:
  explicit Shooter(const OcpProblem& p)
      : p_(p),
        n_(p.model.state_dim()),
        m_(p.model.control_dim()),
        N_(p.segments),
        S_(p.substeps),
        steps_(p.segments * p.substeps),
        xs_(steps_ + 1, Vector(n_)),
        k1_(n_), k2_(n_), k3_(n_), k4_(n_), x2_(n_), x3_(n_), x4_(n_), sum_(n_),
        k1b_(n_), k2b_(n_), k3b_(n_), k4b_(n_), xb_(n_), u_(m_),
        A1_(n_, n_), A2_(n_, n_), A3_(n_, n_), A4_(n_, n_),
        B1_(n_, m_), B2_(n_, m_), B3_(n_, m_), B4_(n_, m_) {}

  // Returns J and stores the trajectory; throws IntegrationDiverged.
  double forward(const Matrix& U, double T) {
    const double h = T / steps_;
    xs_[0] = p_.x0;
    double simpson = 0.0;
    for (int j = 0; j < N_; ++j) {
      const Vector u = U.col(j);
      const double uRu = u.dot(p_.R * u);
      for (int l = 0; l < S_; ++l) {
        const int k = j * S_ + l;
        step(xs_[k], u, h, xs_[k + 1]);
        if (!xs_[k + 1].allFinite()) {
          const double t = (k + 1) * h;
          std::ostringstream msg;
          msg << p_.model.name() << ": prediction diverged at t = " << t;
          throw IntegrationDiverged(t, msg.str());
        }
      }
      if (p_.epsilon > 0.0 || want_integral_) {
        for (int l = 0; l <= S_; ++l) {
          const Vector& x = xs_[j * S_ + l];
          simpson += simpson_weight(l) * (x.dot(p_.W * x) + uRu);
        }
      }
    }
    integral_ = simpson * h / 3.0;
    terminal_q_ = p_.terminal.q(xs_[steps_]);
    return T + p_.epsilon * integral_ + p_.rho * terminal_q_;
  }

  // Reverse sweep at the point of the last forward() call.
  void backward(const Matrix& U, double T, Matrix& gU, double& gT) {
    const double h = T / steps_;
    const double eps = p_.epsilon;
    gU.setZero(m_, N_);
    double h_bar = 0.0;
    Vector lam = p_.rho * p_.terminal.grad_q(xs_[steps_]);
    if (eps > 0.0) lam += eps * (h / 3.0) * 2.0 * (p_.W * xs_[steps_]);
    Vector lam_prev(n_), u_bar(m_);
    for (int k = steps_ - 1; k >= 0; --k) {
      const int j = k / S_;
      const int l = k % S_;
      double hb = 0.0;
      u_ = U.col(j);
      step_vjp(xs_[k], u_, h, lam, lam_prev, u_bar, hb);
      gU.col(j) += u_bar;
      h_bar += hb;
      lam = lam_prev;
      if (eps > 0.0) {
        const double w = (l == 0) ? (j == 0 ? 1.0 : 2.0) : simpson_weight(l);
        lam += eps * (h / 3.0) * w * 2.0 * (p_.W * xs_[k]);
      }
    }
    gT = 1.0 + h_bar / steps_;
    if (eps > 0.0) {
      gT += eps * integral_ / T;
      gU += eps * (T / N_) * 2.0 * (p_.R * U);
    }
  }

  double integral() const { return integral_; }
  double terminal_q() const { return terminal_q_; }
  const Vector& final_state() const { return xs_[steps_]; }
  void want_integral(bool on) { want_integral_ = on; }

 private:
  double simpson_weight(int l) const {
    if (l == 0 || l == S_) return 1.0;
    return (l % 2 == 1) ? 4.0 : 2.0;
  }

  void step(const Vector& x, const Vector& u, double h, Vector& out) {
    const auto& f = p_.model;
    f.eval_unchecked(x, u, k1_);
    x2_ = x + 0.5 * h * k1_;
    f.eval_unchecked(x2_, u, k2_);
    x3_ = x + 0.5 * h * k2_;
    f.eval_unchecked(x3_, u, k3_);
    x4_ = x + h * k3_;
    f.eval_unchecked(x4_, u, k4_);
    out = x + (h / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
  }

  // Vector-Jacobian product of one RK4 step with cotangent lam.
  void step_vjp(const Vector& x, const Vector& u, double h, const Vector& lam, Vector& x_bar,
                Vector& u_bar, double& h_bar) {
    const auto& f = p_.model;
    f.eval_unchecked(x, u, k1_);
    f.jacobians_unchecked(x, u, A1_, B1_);
    x2_ = x + 0.5 * h * k1_;
    f.eval_unchecked(x2_, u, k2_);
    f.jacobians_unchecked(x2_, u, A2_, B2_);
    x3_ = x + 0.5 * h * k2_;
    f.eval_unchecked(x3_, u, k3_);
    f.jacobians_unchecked(x3_, u, A3_, B3_);
    x4_ = x + h * k3_;
    f.eval_unchecked(x4_, u, k4_);
    f.jacobians_unchecked(x4_, u, A4_, B4_);

    sum_ = k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_;
    h_bar = lam.dot(sum_) / 6.0;
    x_bar = lam;

    k4b_ = (h / 6.0) * lam;
    k3b_ = (h / 3.0) * lam;
    k2b_ = (h / 3.0) * lam;
    k1b_ = (h / 6.0) * lam;

    xb_.noalias() = A4_.transpose() * k4b_;
    u_bar.noalias() = B4_.transpose() * k4b_;
    x_bar += xb_;
    k3b_ += h * xb_;
    h_bar += xb_.dot(k3_);

    xb_.noalias() = A3_.transpose() * k3b_;
    u_bar.noalias() += B3_.transpose() * k3b_;
    x_bar += xb_;
    k2b_ += 0.5 * h * xb_;
    h_bar += 0.5 * xb_.dot(k2_);

    xb_.noalias() = A2_.transpose() * k2b_;
    u_bar.noalias() += B2_.transpose() * k2b_;
    x_bar += xb_;
    k1b_ += 0.5 * h * xb_;
    h_bar += 0.5 * xb_.dot(k1_);

    x_bar.noalias() += A1_.transpose() * k1b_;
    u_bar.noalias() += B1_.transpose() * k1b_;
  }

  const OcpProblem& p_;
  int n_, m_, N_, S_, steps_;
  std::vector<Vector> xs_;
  Vector k1_, k2_, k3_, k4_, x2_, x3_, x4_, sum_;
  Vector k1b_, k2b_, k3b_, k4b_, xb_, u_;
  Matrix A1_, A2_, A3_, A4_, B1_, B2_, B3_, B4_;
  double integral_ = 0.0;
  double terminal_q_ = 0.0;
  bool want_integral_ = false;
};

void check_controls(const OcpProblem& p, const Matrix& U) {
  if (U.rows() != p.model.control_dim() || U.cols() != p.segments) {
    std::ostringstream msg;
    msg << "control signal must be " << p.model.control_dim() << " x " << p.segments << ", got "
        << U.rows() << " x " << U.cols();
    throw DimensionError(msg.str());
  }
}

void project(const OcpProblem& p, Matrix& U, double& T) {
  const auto& b = p.model.bounds();
  for (int j = 0; j < U.cols(); ++j) {
    U.col(j) = U.col(j).cwiseMax(b.lower()).cwiseMin(b.upper());
  }
  T = std::max(T, p.T_min);
}

double head_step(const OcpProblem& p) { return p.head_step > 0.0 ? p.head_step : p.delta / 10.0; }

OcpSolution finalize(const OcpProblem& p, const Matrix& U, double T) {
  Shooter shooter(p);
  shooter.want_integral(true);
  const double J = shooter.forward(U, T);
  ControlSignal signal(0.0, T, U);
  const Trajectory head = integrate(p.model, p.x0, signal, head_step(p), p.delta);
  OcpSolution sol{signal, T, J, shooter.final_state()};
  sol.integral_L_total = shooter.integral();
  sol.integral_L_head = running_cost(p.W, p.R, head, signal, 0.0, head.end());
  sol.integral_L_tail = sol.integral_L_total - sol.integral_L_head;
  sol.terminal_q = shooter.terminal_q();
  return sol;
}

}  // namespace

CostBreakdown eval_cost(const OcpProblem& problem, const ControlSignal& signal, double T) {
  problem.validate();
  check_controls(problem, signal.values());
  if (!(T >= problem.T_min)) throw Error("eval_cost: T must be >= T_min");
  const OcpSolution s = finalize(problem, signal.values(), T);
  return {s.J, s.integral_L_total, s.integral_L_head, s.integral_L_tail, s.terminal_q,
          s.x_final};
}

OcpGradient eval_gradient(const OcpProblem& problem, const ControlSignal& signal, double T) {
  problem.validate();
  check_controls(problem, signal.values());
  Shooter shooter(problem);
  OcpGradient g;
  g.J = shooter.forward(signal.values(), T);
  shooter.backward(signal.values(), T, g.controls, g.horizon);
  return g;
}

namespace {

double inner(const Matrix& aU, double aT, const Matrix& bU, double bT) {
  return (aU.array() * bU.array()).sum() + aT * bT;
}

struct Iterate {
  Matrix U;
  double T = 0.0;
  double f = 0.0;
  Matrix gU;
  double gT = 0.0;
};

double projected_gradient_norm(const OcpProblem& p, const Iterate& z) {
  Matrix Up = z.U - z.gU;
  double Tp = z.T - z.gT;
  project(p, Up, Tp);
  return std::max((Up - z.U).lpNorm<Eigen::Infinity>(), std::abs(Tp - z.T));
}

double try_forward(Shooter& shooter, const Matrix& U, double T) {
  try {
    return shooter.forward(U, T);
  } catch (const IntegrationDiverged&) {
    return std::numeric_limits<double>::infinity();
  }
}

// One projected-gradient iteration; returns false when no step is accepted.
bool spectral_step(const OcpProblem& p, const SolverOptions& o, Shooter& shooter, Iterate& z,
                   double& lambda) {
  Matrix dU = z.U - lambda * z.gU;
  double dT = z.T - lambda * z.gT;
  project(p, dU, dT);
  dU -= z.U;
  dT -= z.T;
  const double slope = inner(z.gU, z.gT, dU, dT);
  if (!(slope < 0.0)) return false;

  for (double t = 1.0; t > 1e-18; t *= o.shrink) {
    const Matrix U_trial = z.U + t * dU;
    const double T_trial = z.T + t * dT;
    const double f_trial = try_forward(shooter, U_trial, T_trial);
    if (f_trial <= z.f + o.sufficient_decrease * t * slope) {
      Matrix gU;
      double gT = 0.0;
      shooter.backward(U_trial, T_trial, gU, gT);
      const double s_sq = (U_trial - z.U).squaredNorm() + (T_trial - z.T) * (T_trial - z.T);
      const double sy = inner(U_trial - z.U, T_trial - z.T, gU - z.gU, gT - z.gT);
      if (o.spectral_steps) {
        lambda = sy > 0.0 ? std::clamp(s_sq / sy, 1e-12, 1e12) : std::min(1e12, 10.0 * lambda);
      }
      z = Iterate{U_trial, T_trial, f_trial, std::move(gU), gT};
      return true;
    }
  }
  return false;
}

// Central differences of the adjoint gradient, one column per entry of
// `columns`. Columns left out are taken from `prior` (or a diagonal guess)
// except where symmetry supplies them.
Matrix fd_hessian(Shooter& shooter, const Vector& zv, int m, int N,
                  const std::vector<char>& columns, const Matrix& prior) {
  const int D = static_cast<int>(zv.size());
  Matrix H = Matrix::Zero(D, D);
  Vector z = zv;
  Matrix gU;
  double gT = 0.0;
  Vector gp(D), gm(D);
  auto gradient_at = [&](Vector& out) {
    const Matrix U = Eigen::Map<const Matrix>(z.data(), m, N);
    shooter.forward(U, z[D - 1]);
    shooter.backward(U, z[D - 1], gU, gT);
    out.head(D - 1) = Eigen::Map<const Vector>(gU.data(), D - 1);
    out[D - 1] = gT;
  };
  double diag = 0.0;
  for (int i = 0; i < D; ++i) {
    if (!columns[i]) continue;
    const double s = 1e-5 * std::max(1.0, std::abs(zv[i]));
    z[i] = zv[i] + s;
    gradient_at(gp);
    z[i] = zv[i] - s;
    gradient_at(gm);
    z[i] = zv[i];
    H.col(i) = (gp - gm) / (2.0 * s);
    diag = std::max(diag, std::abs(H(i, i)));
  }
  const bool have_prior = prior.rows() == D;
  if (diag == 0.0) diag = 1.0;
  for (int j = 0; j < D; ++j) {
    if (columns[j]) continue;
    for (int i = 0; i < D; ++i) {
      if (columns[i]) {
        H(i, j) = H(j, i);
      } else {
        H(i, j) = have_prior ? prior(i, j) : (i == j ? diag : 0.0);
      }
    }
  }
  return 0.5 * (H + H.transpose());
}

// Minimizes g.d + d'Hd/2 over lo <= d <= hi for positive definite H with a
// primal active-set method: Newton steps on the free variables are cut at
// the first blocking bound, and bounds whose multiplier turns negative are
// released.
Vector box_qp(const Matrix& H, const Vector& g, const Vector& lo, const Vector& hi) {
  const int D = static_cast<int>(g.size());
  Vector d = Vector::Zero(D).cwiseMax(lo).cwiseMin(hi);
  std::vector<char> fixed(D, 0);
  for (int i = 0; i < D; ++i) fixed[i] = d[i] <= lo[i] || d[i] >= hi[i];
  const double gscale = std::max(1.0, g.lpNorm<Eigen::Infinity>());
  for (int it = 0; it < 4 * D + 10; ++it) {
    const Vector grad = g + H * d;
    std::vector<int> free_idx;
    for (int i = 0; i < D; ++i) {
      if (!fixed[i]) free_idx.push_back(i);
    }
    const int F = static_cast<int>(free_idx.size());
    Vector step_f;
    if (F > 0) {
      Matrix H_ff(F, F);
      Vector g_f(F);
      for (int a = 0; a < F; ++a) {
        g_f[a] = grad[free_idx[a]];
        for (int b = 0; b < F; ++b) H_ff(a, b) = H(free_idx[a], free_idx[b]);
      }
      step_f = -H_ff.ldlt().solve(g_f);
    }
    double alpha = 1.0;
    int blocking = -1;
    for (int a = 0; a < F; ++a) {
      const int i = free_idx[a];
      const double si = step_f[a];
      double limit = std::numeric_limits<double>::infinity();
      if (si > 0.0) limit = (hi[i] - d[i]) / si;
      if (si < 0.0) limit = (lo[i] - d[i]) / si;
      if (limit < alpha) {
        alpha = std::max(limit, 0.0);
        blocking = i;
      }
    }
    for (int a = 0; a < F; ++a) d[free_idx[a]] += alpha * step_f[a];
    if (blocking >= 0) {
      d[blocking] = d[blocking] - lo[blocking] < hi[blocking] - d[blocking]
                        ? lo[blocking]
                        : hi[blocking];
      fixed[blocking] = 1;
      continue;
    }
    // Free minimizer reached: release the bound with the most negative multiplier.
    const Vector grad_new = g + H * d;
    int release = -1;
    double worst = 1e-12 * gscale;
    for (int i = 0; i < D; ++i) {
      if (!fixed[i]) continue;
      const double pull = d[i] <= lo[i] ? -grad_new[i] : grad_new[i];
      if (pull > worst) {
        worst = pull;
        release = i;
      }
    }
    if (release < 0) break;
    fixed[release] = 0;
  }
  return d;
}

// Curvature carried between iterations of one solve: a finite-difference
// Hessian with its spectrum folded positive, refined by damped BFGS updates
// while full steps keep being accepted.
struct Curvature {
  Matrix H;
  double scale = 1.0;
  double mu = -1.0;
  bool valid = false;
  bool fresh = false;
};

// Variables held at a bound by their gradient keep their old curvature;
// only the rest is differenced. Near a bang-bang solution this is a small
// fraction of the columns.
void refresh(Curvature& c, Shooter& shooter, const Vector& zv, const Vector& g,
             const Vector& lo, const Vector& hi, int m, int N, const SolverOptions& o) {
  const int D = static_cast<int>(zv.size());
  std::vector<char> columns(D, 1);
  for (int i = 0; i < D; ++i) {
    columns[i] = !((zv[i] <= lo[i] && g[i] > 0.0) || (zv[i] >= hi[i] && g[i] < 0.0));
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(fd_hessian(shooter, zv, m, N, columns, c.H));
  Vector ev = eig.eigenvalues().cwiseAbs();
  c.scale = std::max(ev.maxCoeff(), 1e-12);
  ev = ev.cwiseMax(1e-12 * c.scale);
  c.H = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
  if (c.mu <= 0.0) c.mu = o.initial_damping * c.scale;
  c.valid = true;
  c.fresh = true;
}

void bfgs_update(Curvature& c, const Vector& s, const Vector& y) {
  const Vector Bs = c.H * s;
  const double sBs = s.dot(Bs);
  if (!(sBs > 0.0)) return;
  const double sy = s.dot(y);
  const double theta = sy >= 0.2 * sBs ? 1.0 : 0.8 * sBs / (sBs - sy);
  const Vector r = theta * y + (1.0 - theta) * Bs;
  c.H += r * r.transpose() / s.dot(r) - Bs * Bs.transpose() / sBs;
  c.fresh = false;
}

// One sequential box-QP iteration: the bounds enter the quadratic subproblem
// directly so whole bang-bang arcs can move in a single step. Returns false
// when no step is accepted even with freshly computed curvature.
bool newton_step(const OcpProblem& p, const SolverOptions& o, Shooter& shooter, Iterate& z,
                 Curvature& curv) {
  const int m = p.model.control_dim();
  const int N = p.segments;
  const int D = m * N + 1;

  Vector g(D), zv(D), lo(D), hi(D);
  g.head(D - 1) = Eigen::Map<const Vector>(z.gU.data(), D - 1);
  g[D - 1] = z.gT;
  zv.head(D - 1) = Eigen::Map<const Vector>(z.U.data(), D - 1);
  zv[D - 1] = z.T;
  for (int j = 0; j < N; ++j) {
    lo.segment(j * m, m) = p.model.bounds().lower();
    hi.segment(j * m, m) = p.model.bounds().upper();
  }
  lo[D - 1] = p.T_min;
  hi[D - 1] = std::numeric_limits<double>::infinity();

  if (!curv.valid) refresh(curv, shooter, zv, g, lo, hi, m, N, o);
  for (int attempt = 0; attempt < 12; ++attempt) {
    const Matrix Hm = curv.H + curv.mu * Matrix::Identity(D, D);
    const Vector d = box_qp(Hm, g, lo - zv, hi - zv);
    const double model_drop = -(g.dot(d) + 0.5 * d.dot(Hm * d));
    if (!(model_drop > 0.0)) {
      if (curv.fresh) return false;
      refresh(curv, shooter, zv, g, lo, hi, m, N, o);
      continue;
    }
    for (double t = 1.0; t > 1e-6; t *= o.shrink) {
      Matrix U_trial = Eigen::Map<const Matrix>(zv.data(), m, N) +
                       t * Eigen::Map<const Matrix>(d.data(), m, N);
      double T_trial = zv[D - 1] + t * d[D - 1];
      project(p, U_trial, T_trial);
      const double f_trial = try_forward(shooter, U_trial, T_trial);
      if (f_trial <= z.f + o.sufficient_decrease * t * g.dot(d)) {
        const double ratio = (z.f - f_trial) / model_drop;
        const bool good = t == 1.0 && ratio > 0.75;
        Matrix gU;
        double gT = 0.0;
        shooter.backward(U_trial, T_trial, gU, gT);
        if (good) {
          curv.mu = std::max(curv.mu * 0.1, 1e-14 * curv.scale);
        } else if (t < 1.0 || ratio < 0.25) {
          curv.mu *= 4.0;
        }
        Vector s(D), y(D);
        s.head(D - 1) = Eigen::Map<const Vector>(U_trial.data(), D - 1) - zv.head(D - 1);
        s[D - 1] = T_trial - zv[D - 1];
        y.head(D - 1) = Eigen::Map<const Vector>(gU.data(), D - 1) - g.head(D - 1);
        y[D - 1] = gT - g[D - 1];
        if (good) {
          bfgs_update(curv, s, y);
        } else {
          curv.valid = false;
        }
        z = Iterate{std::move(U_trial), T_trial, f_trial, std::move(gU), gT};
        return true;
      }
    }
    if (!curv.fresh) {
      refresh(curv, shooter, zv, g, lo, hi, m, N, o);
    } else {
      curv.mu = std::max(curv.mu, 1e-8 * curv.scale) * 100.0;
    }
  }
  return false;
}

}  // namespace

namespace {

OcpSolution solve_single(const OcpProblem& problem, const std::optional<WarmStart>& warm_start,
                         const SolverOptions& options) {
  Iterate z;
  if (warm_start) {
    check_controls(problem, warm_start->controls);
    z.U = warm_start->controls;
    z.T = warm_start->T;
  } else {
    const WarmStart guess = lq_fallback_guess(problem);
    z.U = guess.controls;
    z.T = guess.T;
  }
  project(problem, z.U, z.T);

  Shooter shooter(problem);
  try {
    z.f = shooter.forward(z.U, z.T);
  } catch (const IntegrationDiverged& e) {
    throw SolverError(std::string("initial guess diverges, try a different warm start: ") +
                      e.what());
  }
  shooter.backward(z.U, z.T, z.gU, z.gT);

  std::vector<double> history;
  if (options.record_history) history.push_back(z.f);
  double lambda = options.initial_step;
  Curvature curv;
  int it = 0;
  bool converged = false;
  double pg_norm = 0.0;
  for (; it < options.max_iterations; ++it) {
    pg_norm = projected_gradient_norm(problem, z);
    if (pg_norm <= options.tol_g * std::max(1.0, std::abs(z.f))) {
      converged = true;
      break;
    }
    const bool moved = options.method == SolverMethod::projected_newton
                           ? newton_step(problem, options, shooter, z, curv)
                           : spectral_step(problem, options, shooter, z, lambda);
    if (!moved) break;
    if (options.record_history) history.push_back(z.f);
  }

  OcpSolution sol = finalize(problem, z.U, z.T);
  sol.iterations = it;
  sol.converged = converged;
  sol.projected_gradient_norm = pg_norm;
  sol.cost_history = std::move(history);
  return sol;
}

}  // namespace

OcpSolution solve(const OcpProblem& problem, const std::optional<WarmStart>& warm_start,
                  const SolverOptions& options) {
  problem.validate();
  if (!(options.continuation_rho > 0.0) || options.continuation_rho >= problem.rho) {
    return solve_single(problem, warm_start, options);
  }
  // Penalty continuation: a soft terminal penalty lets the horizon move
  // freely, later stages only tighten the endpoint.
  OcpProblem stage = problem;
  std::optional<WarmStart> start = warm_start;
  int total = 0;
  std::vector<double> history;
  for (double r = options.continuation_rho;; r = std::min(problem.rho, r * options.continuation_factor)) {
    stage.rho = r;
    OcpSolution sol = solve_single(stage, start, options);
    total += sol.iterations;
    history.insert(history.end(), sol.cost_history.begin(), sol.cost_history.end());
    if (r >= problem.rho) {
      sol.iterations = total;
      sol.cost_history = std::move(history);
      return sol;
    }
    start = sol.as_warm_start();
  }
}

OcpSolution solve_multistart(const OcpProblem& problem, const WarmStart& base, int restarts,
                             unsigned long long seed, const SolverOptions& options) {
  std::vector<WarmStart> starts{base};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  const auto& b = problem.model.bounds();
  for (int r = 0; r < restarts; ++r) {
    WarmStart s = base;
    for (int j = 0; j < s.controls.cols(); ++j) {
      for (int i = 0; i < s.controls.rows(); ++i) {
        const double span = b.upper()[i] - b.lower()[i];
        s.controls(i, j) += 0.15 * span * gauss(rng);
      }
    }
    s.T *= std::exp(0.05 * gauss(rng));
    starts.push_back(std::move(s));
  }

  std::vector<std::future<std::optional<OcpSolution>>> jobs;
  for (const auto& s : starts) {
    jobs.push_back(std::async(std::launch::async, [&problem, s, &options]() {
      try {
        return std::optional<OcpSolution>(solve(problem, s, options));
      } catch (const SolverError&) {
        return std::optional<OcpSolution>();
      }
    }));
  }
  std::optional<OcpSolution> best;
  for (auto& job : jobs) {
    auto sol = job.get();
    if (sol && (!best || sol->J < best->J)) best = std::move(sol);
  }
  if (!best) throw SolverError("solve_multistart: every start diverged");
  return *best;
}

WarmStart guess_from_policy(const OcpProblem& problem, const Policy& policy, double T) {
  problem.validate();
  const int N = problem.segments;
  const int S = problem.substeps;
  const double h = T / (N * S);
  const auto& model = problem.model;
  WarmStart g{Matrix(model.control_dim(), N), std::max(T, problem.T_min)};
  Vector x = problem.x0;
  Vector k1(x.size()), k2(x.size()), k3(x.size()), k4(x.size()), tmp(x.size());
  for (int j = 0; j < N; ++j) {
    const Vector u = clamp_control(model.bounds(), policy(x));
    g.controls.col(j) = u;
    for (int l = 0; l < S; ++l) {
      model.eval_unchecked(x, u, k1);
      tmp = x + 0.5 * h * k1;
      model.eval_unchecked(tmp, u, k2);
      tmp = x + 0.5 * h * k2;
      model.eval_unchecked(tmp, u, k3);
      tmp = x + h * k3;
      model.eval_unchecked(tmp, u, k4);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!x.allFinite()) {
      throw SolverError("guess_from_policy: rollout diverged");
    }
  }
  return g;
}

double policy_reach_time(const OcpProblem& problem, const Policy& policy, double t_max) {
  problem.validate();
  const double h = problem.delta / 10.0;
  const auto& model = problem.model;
  Vector x = problem.x0;
  Vector next(x.size());
  Vector k1(x.size()), k2(x.size()), k3(x.size()), k4(x.size()), tmp(x.size());
  double t = 0.0;
  while (!problem.terminal.contains(x)) {
    if (t >= t_max) {
      throw SolverError("policy_reach_time: the policy does not reach the terminal set by t = " +
                        std::to_string(t_max));
    }
    const Vector u = clamp_control(model.bounds(), policy(x));
    model.eval_unchecked(x, u, k1);
    tmp = x + 0.5 * h * k1;
    model.eval_unchecked(tmp, u, k2);
    tmp = x + 0.5 * h * k2;
    model.eval_unchecked(tmp, u, k3);
    tmp = x + h * k3;
    model.eval_unchecked(tmp, u, k4);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    t += h;
    if (!x.allFinite()) throw SolverError("policy_reach_time: rollout diverged");
  }
  return std::max(t, problem.T_min);
}

WarmStart lq_fallback_guess(const OcpProblem& problem) {
  return guess_from_policy(problem, linear_feedback(problem.terminal.K, problem.model.bounds()),
                           problem.T_min);
}

double lq_fallback_cost(const OcpProblem& problem, double h) {
  problem.validate();
  const auto traj = simulate_feedback(problem.model, problem.x0,
                                      linear_feedback(problem.terminal.K, problem.model.bounds()),
                                      0.0, problem.T_min, h);
  return problem.T_min + problem.epsilon * running_cost(problem.W, problem.R, traj) +
         problem.rho * problem.terminal.q(traj.states.back());
}

WarmStart shift_warm_start(const OcpSolution& previous, double delta, const OcpProblem& problem) {
  const double T_prev = previous.T;
  const double T_next = std::max(T_prev - delta, problem.T_min);
  const int N = problem.segments;
  const int m = problem.model.control_dim();

  // The tail [T_prev, delta + T_next] runs u_s = K x from the old terminal state.
  const double tail = delta + T_next - T_prev;
  std::optional<FeedbackTrajectory> extension;
  if (tail > 1e-12) {
    extension = simulate_feedback(problem.model, previous.x_final,
                                  linear_feedback(problem.terminal.K, problem.model.bounds()),
                                  0.0, tail, std::min(head_step(problem), tail / 2.0));
  }

  // Exact average of the shifted signal over each new segment. Holding the
  // integral of u keeps the warm-start trajectory close to the old one even
  // when a switch falls inside a segment.
  std::vector<double> knots;
  std::vector<Vector> pieces;
  for (int j = 0; j < previous.signal.segments(); ++j) {
    const double a = previous.signal.segment_start(j) - previous.signal.t0();
    knots.push_back(a);
    pieces.push_back(previous.signal.value(j));
  }
  if (extension) {
    const auto& times = extension->times;
    for (std::size_t k = 0; k + 1 < times.size(); ++k) {
      knots.push_back(T_prev + times[k]);
      pieces.push_back(extension->controls[k]);
    }
  }
  knots.push_back(std::numeric_limits<double>::infinity());

  WarmStart out{Matrix(m, N), T_next};
  const double seg = T_next / N;
  std::size_t p = 0;
  for (int j = 0; j < N; ++j) {
    const double a = delta + j * seg;
    const double b = a + seg;
    while (p + 1 < pieces.size() && knots[p + 1] <= a) ++p;
    Vector acc = Vector::Zero(m);
    for (std::size_t q = p; q < pieces.size() && knots[q] < b; ++q) {
      const double lo = std::max(a, knots[q]);
      const double hi = std::min(b, knots[q + 1]);
      if (hi > lo) acc += (hi - lo) * pieces[q];
    }
    out.controls.col(j) = clamp_control(problem.model.bounds(), acc / seg);
  }
  return out;
}

}  // namespace qtorhc
