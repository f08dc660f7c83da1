#include "qtorhc/synthesis.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "qtorhc/errors.hpp"
#include "qtorhc/integrator.hpp"

namespace qtorhc {
namespace {

// Solves M X + X M' = C through (I (x) M + M (x) I) vec(X) = vec(C).
Matrix solve_kron_lyapunov(const Matrix& M, const Matrix& C) {
  const Eigen::Index n = M.rows();
  const Matrix I = Matrix::Identity(n, n);
  Matrix big = Matrix::Zero(n * n, n * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      // I (x) M contributes M on the diagonal blocks; M (x) I contributes
      // M(i, j) * I in block (i, j).
      if (i == j) big.block(i * n, j * n, n, n) += M;
      big.block(i * n, j * n, n, n) += M(i, j) * I;
    }
  }
  const Vector rhs = Eigen::Map<const Vector>(C.data(), n * n);
  Eigen::FullPivLU<Matrix> lu(big);
  if (!lu.isInvertible()) throw SynthesisError("Lyapunov operator is singular");
  Vector sol = lu.solve(rhs);
  // One step of iterative refinement keeps the residual at rounding level.
  sol += lu.solve(rhs - big * sol);
  Matrix X = Eigen::Map<Matrix>(sol.data(), n, n);
  return 0.5 * (X + X.transpose());
}

bool is_symmetric(const Matrix& M, double tol = 1e-10) {
  return M.rows() == M.cols() &&
         (M - M.transpose()).lpNorm<Eigen::Infinity>() <=
             tol * std::max(1.0, M.lpNorm<Eigen::Infinity>());
}

bool is_positive_definite(const Matrix& M) {
  Eigen::LLT<Matrix> llt(M);
  return llt.info() == Eigen::Success;
}

}  // namespace

void TerminalData::validate() const {
  if (H.rows() != H.cols() || K.cols() != H.rows()) {
    throw DimensionError("terminal data: K must be m x n and H n x n");
  }
  if (!is_symmetric(H) || !is_positive_definite(H)) {
    throw SynthesisError("terminal data: H must be symmetric positive definite");
  }
  if (!(alpha > 0.0)) throw SynthesisError("terminal data: alpha must be positive");
  if (!(k > 1.0)) throw SynthesisError("terminal data: k must exceed 1");
}

double spectral_abscissa(const Matrix& M) {
  Eigen::EigenSolver<Matrix> es(M, false);
  return es.eigenvalues().real().maxCoeff();
}

Matrix solve_lyapunov(const Matrix& A_K, const Matrix& Q) {
  if (A_K.rows() != A_K.cols() || Q.rows() != A_K.rows() || Q.cols() != A_K.cols()) {
    throw DimensionError("solve_lyapunov: A_K and Q must be square of the same size");
  }
  if (!is_symmetric(Q)) throw SynthesisError("solve_lyapunov: Q must be symmetric");
  const double abscissa = spectral_abscissa(A_K);
  if (!(abscissa < 0.0)) {
    std::ostringstream msg;
    msg << "solve_lyapunov: A_K is not Hurwitz (max Re eig = " << abscissa << ")";
    throw SynthesisError(msg.str());
  }
  return solve_kron_lyapunov(A_K.transpose(), -Q);
}

double lyapunov_residual(const Matrix& A_K, const Matrix& Q, const Matrix& H) {
  return (A_K.transpose() * H + H * A_K + Q).norm();
}

double care_relative_residual(const Matrix& A, const Matrix& B, const Matrix& W, const Matrix& R,
                              const Matrix& P) {
  const Matrix lin = A.transpose() * P + P * A;
  const Matrix quad = P * B * R.llt().solve(B.transpose()) * P;
  const double scale = std::max({W.norm(), lin.norm(), quad.norm(), 1e-300});
  return (lin - quad + W).norm() / scale;
}

CareSolution solve_care(const Matrix& A, const Matrix& B, const Matrix& W, const Matrix& R,
                        const CareOptions& options) {
  const Eigen::Index n = A.rows();
  const Eigen::Index m = B.cols();
  if (A.cols() != n || B.rows() != n || W.rows() != n || W.cols() != n || R.rows() != m ||
      R.cols() != m) {
    throw DimensionError("solve_care: inconsistent matrix dimensions");
  }
  if (!is_symmetric(W) || !is_symmetric(R)) {
    throw SynthesisError("solve_care: W and R must be symmetric");
  }
  Eigen::LLT<Matrix> R_llt(R);
  if (R_llt.info() != Eigen::Success) throw SynthesisError("solve_care: R must be positive definite");

  // Bass gain: with A + beta I anti-stable, Z solving
  // (A + beta I) Z + Z (A + beta I)' = 2 B B' is positive definite for a
  // controllable pair, and K0 = -B' Z^{-1} places eig(A + B K0) at real part -beta.
  Eigen::EigenSolver<Matrix> es(A, false);
  const double beta = 1.0 + es.eigenvalues().real().cwiseAbs().maxCoeff();
  const Matrix A_shift = A + beta * Matrix::Identity(n, n);
  const Matrix Z = solve_kron_lyapunov(A_shift, 2.0 * B * B.transpose());
  Eigen::LLT<Matrix> Z_llt(Z);
  if (Z_llt.info() != Eigen::Success) {
    throw SynthesisError("solve_care: no stabilizing initial gain found ((A, B) not controllable)");
  }
  Matrix K = -Z_llt.solve(B).transpose();
  if (!(spectral_abscissa(A + B * K) < 0.0)) {
    throw SynthesisError("solve_care: initial gain is not stabilizing");
  }

  CareSolution sol;
  Matrix P_prev = Matrix::Zero(n, n);
  for (int it = 1; it <= options.max_iterations; ++it) {
    const Matrix A_K = A + B * K;
    const Matrix Q = W + K.transpose() * R * K;
    sol.P = solve_lyapunov(A_K, 0.5 * (Q + Q.transpose()));
    K = -R_llt.solve(B.transpose() * sol.P);
    sol.iterations = it;
    const double change = (sol.P - P_prev).norm();
    P_prev = sol.P;
    if (change <= options.tolerance * sol.P.norm()) break;
    if (it == options.max_iterations) {
      throw SynthesisError("solve_care: Newton-Kleinman iteration did not converge");
    }
  }
  sol.K = K;
  sol.relative_residual = care_relative_residual(A, B, W, R, sol.P);
  return sol;
}

double control_constraint_level(const Matrix& K, const Matrix& H, const ControlBounds& bounds) {
  if (K.rows() != bounds.dim() || K.cols() != H.rows()) {
    throw DimensionError("control_constraint_level: K, H and bounds are inconsistent");
  }
  Eigen::LLT<Matrix> llt(H);
  if (llt.info() != Eigen::Success) {
    throw SynthesisError("control_constraint_level: H is singular or not positive definite");
  }
  double level = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < K.rows(); ++j) {
    const Vector row = K.row(j).transpose();
    const double spread = row.dot(llt.solve(row));
    if (spread <= 0.0) continue;
    const double bound = std::min(bounds.upper()[j], -bounds.lower()[j]);
    level = std::min(level, bound * bound / spread);
  }
  return level;
}

CertificationReport certify_alpha(const ControlModel& model, const Matrix& K, const Matrix& H,
                                  const Matrix& W, const Matrix& R, double k, double alpha,
                                  const CertifyOptions& options) {
  const int n = model.state_dim();
  CertificationReport rep;
  rep.alpha = alpha;
  rep.alpha_u = control_constraint_level(K, H, model.bounds());
  rep.constraint_ok = alpha <= rep.alpha_u;
  rep.worst_decrease = -std::numeric_limits<double>::infinity();

  const Matrix U = Eigen::LLT<Matrix>(H).matrixU();  // H = U'U
  const Matrix Q = W + K.transpose() * R * K;
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> gauss;

  auto sample = [&](double level) {
    Vector z(n);
    for (int i = 0; i < n; ++i) z[i] = gauss(rng);
    z *= std::sqrt(level) / z.norm();
    return Vector(U.triangularView<Eigen::Upper>().solve(z));
  };

  const Policy feedback = [&K](const Vector& x) -> Vector { return K * x; };
  rep.decrease_ok = true;
  rep.invariance_ok = true;
  Vector dx(n);
  for (int s = 0; s < options.n_samples; ++s) {
    for (const double level : {alpha, 0.5 * alpha}) {
      const Vector x = sample(level);
      const Vector u = K * x;
      model.eval_unchecked(x, u, dx);
      const double qdot = 2.0 * k * x.dot(H * dx);
      const double decrease = qdot + x.dot(Q * x);
      rep.worst_decrease = std::max(rep.worst_decrease, decrease);
      if (!(decrease <= -options.margin)) rep.decrease_ok = false;

      if (level != alpha) continue;
      const auto traj =
          simulate_feedback(model, x, feedback, 0.0, options.invariance_horizon, options.step);
      double prev = x.dot(H * x);
      for (std::size_t i = 1; i < traj.states.size(); ++i) {
        const double cur = traj.states[i].dot(H * traj.states[i]);
        const double growth = (cur - prev) / prev;
        rep.worst_growth = std::max(rep.worst_growth, growth);
        if (growth > 1e-12) rep.invariance_ok = false;
        prev = cur;
      }
    }
  }
  rep.passed = rep.decrease_ok && rep.invariance_ok && rep.constraint_ok;
  return rep;
}

double max_certified_alpha(const ControlModel& model, const Matrix& K, const Matrix& H,
                           const Matrix& W, const Matrix& R, double k,
                           const CertifyOptions& options) {
  auto ok = [&](double a) { return certify_alpha(model, K, H, W, R, k, a, options).passed; };
  double hi = control_constraint_level(K, H, model.bounds());
  if (!std::isfinite(hi)) hi = 1e6;
  if (ok(hi)) return 0.9 * hi;

  double lo = hi;
  while (!ok(lo)) {
    hi = lo;
    lo *= 0.1;
    if (lo < 1e-8) {
      throw SynthesisError("max_certified_alpha: no level certifies down to 1e-8");
    }
  }
  for (int it = 0; it < 40 && (hi - lo) > 1e-6 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ok(mid) ? lo : hi) = mid;
  }
  return 0.9 * lo;
}

TerminalSynthesis synthesize_terminal(const ControlModel& model, const Matrix& W, const Matrix& R,
                                      const SynthesisOptions& options) {
  if (!(options.k > 1.0)) throw SynthesisError("synthesize_terminal: k must exceed 1");
  const Vector x0 = Vector::Zero(model.state_dim());
  const Vector u0 = Vector::Zero(model.control_dim());
  const Jacobians lin = model.jacobians(x0, u0);

  TerminalSynthesis out;
  out.A = lin.fx;
  out.B = lin.fu;
  out.care = solve_care(out.A, out.B, W, R, options.care);
  const Matrix& K = out.care.K;
  const Matrix A_K = out.A + out.B * K;
  const Matrix Q = W + K.transpose() * R * K;
  const Matrix H = solve_lyapunov(A_K, 0.5 * (Q + Q.transpose()));
  out.lyapunov_residual = lyapunov_residual(A_K, Q, H);
  out.closed_loop_abscissa = spectral_abscissa(A_K);

  const double alpha = options.alpha_override
                           ? *options.alpha_override
                           : max_certified_alpha(model, K, H, W, R, options.k, options.certify);
  out.certification = certify_alpha(model, K, H, W, R, options.k, alpha, options.certify);
  out.terminal = TerminalData{K, H, alpha, options.k, 1.0};
  out.terminal.validate();
  return out;
}

}  // namespace qtorhc
