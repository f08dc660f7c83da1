#pragma once

#include <optional>

#include "qtorhc/model.hpp"

namespace qtorhc {

/// Local LQ machinery around the origin: u_s = K x, terminal penalty
/// q(x) = k x'Hx and terminal set {x : x'Hx <= alpha}.
struct TerminalData {
  Matrix K;
  Matrix H;
  double alpha = 0.0;
  double k = 1.1;
  double c = 1.0;  // q(x) >= c x'Hx

  double quad(const Vector& x) const { return x.dot(H * x); }
  double q(const Vector& x) const { return k * quad(x); }
  Vector grad_q(const Vector& x) const { return 2.0 * k * (H * x); }
  bool contains(const Vector& x) const { return quad(x) <= alpha; }
  void validate() const;
};

struct CareSolution {
  Matrix P;
  Matrix K;  // u = K x, K = -R^{-1} B' P
  int iterations = 0;
  double relative_residual = 0.0;
};

struct CareOptions {
  double tolerance = 1e-14;
  int max_iterations = 100;
};

/// Newton-Kleinman iteration for A'P + PA - PBR^{-1}B'P + W = 0, started
/// from a Bass-type stabilizing gain. Throws SynthesisError when no
/// stabilizing gain exists or the iteration does not settle.
CareSolution solve_care(const Matrix& A, const Matrix& B, const Matrix& W, const Matrix& R,
                        const CareOptions& options = {});

/// ||A'P + PA - PBR^{-1}B'P + W||_F scaled by the largest of the three
/// term norms.
double care_relative_residual(const Matrix& A, const Matrix& B, const Matrix& W, const Matrix& R,
                              const Matrix& P);

/// Solves A_K' H + H A_K = -Q by Kronecker linearization (dense n^2 x n^2
/// system, fine for the small plants handled here). A_K must be Hurwitz.
Matrix solve_lyapunov(const Matrix& A_K, const Matrix& Q);

/// ||A_K' H + H A_K + Q||_F.
double lyapunov_residual(const Matrix& A_K, const Matrix& Q, const Matrix& H);

/// Largest real part among the eigenvalues of M.
double spectral_abscissa(const Matrix& M);

/// Largest alpha such that K x stays inside the control box on x'Hx <= alpha.
/// Per row j the extreme of K_j x on the ellipsoid is sqrt(alpha K_j H^{-1} K_j').
double control_constraint_level(const Matrix& K, const Matrix& H, const ControlBounds& bounds);

struct CertifyOptions {
  int n_samples = 1000;
  /// Length of the closed-loop invariance simulation (twice the sampling time).
  double invariance_horizon = 0.1;
  double step = 0.005;
  /// Required strict margin in q' + L <= -margin.
  double margin = 1e-9;
  unsigned long long seed = 1;
};

struct CertificationReport {
  bool passed = false;
  bool decrease_ok = false;
  bool invariance_ok = false;
  bool constraint_ok = false;
  double alpha = 0.0;
  double alpha_u = 0.0;
  double worst_decrease = 0.0;  // max of q' + L over samples
  double worst_growth = 0.0;    // max relative increase of x'Hx along a simulated step
};

/// Sampling-based check of the terminal-set conditions at level alpha:
/// decrease q' + L <= 0 on the boundary and half-level shell, forward
/// invariance of the ellipsoid under u = K x, and admissibility of K x.
CertificationReport certify_alpha(const ControlModel& model, const Matrix& K, const Matrix& H,
                                  const Matrix& W, const Matrix& R, double k, double alpha,
                                  const CertifyOptions& options = {});

/// Bisection on (0, control_constraint_level]; returns 0.9 times the largest
/// certified level.
double max_certified_alpha(const ControlModel& model, const Matrix& K, const Matrix& H,
                           const Matrix& W, const Matrix& R, double k,
                           const CertifyOptions& options = {});

struct SynthesisOptions {
  double k = 1.1;
  std::optional<double> alpha_override;
  CertifyOptions certify;
  CareOptions care;
};

struct TerminalSynthesis {
  TerminalData terminal;
  CareSolution care;
  Matrix A;
  Matrix B;
  double lyapunov_residual = 0.0;
  double closed_loop_abscissa = 0.0;
  CertificationReport certification;
};

/// Linearizes the plant at the origin and builds K, H and a certified alpha
/// (or certifies the override when one is supplied).
TerminalSynthesis synthesize_terminal(const ControlModel& model, const Matrix& W, const Matrix& R,
                                      const SynthesisOptions& options = {});

}  // namespace qtorhc
