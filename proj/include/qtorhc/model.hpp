#pragma once

#include <functional>
#include <string>

#include <Eigen/Dense>

namespace qtorhc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Box of admissible control values. Zero must be strictly interior.
class ControlBounds {
 public:
  ControlBounds(Vector u_min, Vector u_max);
  static ControlBounds symmetric(int m, double limit);

  int dim() const { return static_cast<int>(lower_.size()); }
  const Vector& lower() const { return lower_; }
  const Vector& upper() const { return upper_; }
  bool contains(const Vector& u) const;

 private:
  Vector lower_;
  Vector upper_;
};

/// Componentwise projection of u onto the bounds.
Vector clamp_control(const ControlBounds& bounds, const Vector& u);

struct Jacobians {
  Matrix fx;  // n x n
  Matrix fu;  // n x m
};

/// Time-invariant plant x' = f(x, u) with analytic Jacobians.
///
/// The callbacks write into caller-owned storage that is already sized; the
/// checked entry points (eval, jacobians) allocate and validate dimensions,
/// the unchecked ones are meant for integrator inner loops.
class ControlModel {
 public:
  using Dynamics = std::function<void(const Vector& x, const Vector& u, Vector& dx)>;
  using JacobianFn =
      std::function<void(const Vector& x, const Vector& u, Matrix& fx, Matrix& fu)>;

  ControlModel(std::string name, int n, int m, Dynamics f, JacobianFn jac,
               ControlBounds bounds, double lipschitz);

  const std::string& name() const { return name_; }
  int state_dim() const { return n_; }
  int control_dim() const { return m_; }
  const ControlBounds& bounds() const { return bounds_; }
  /// Lipschitz constant of f in x, valid on the plant's operating region only.
  double lipschitz() const { return lipschitz_; }

  Vector eval(const Vector& x, const Vector& u) const;
  Jacobians jacobians(const Vector& x, const Vector& u) const;

  void eval_unchecked(const Vector& x, const Vector& u, Vector& dx) const { f_(x, u, dx); }
  void jacobians_unchecked(const Vector& x, const Vector& u, Matrix& fx, Matrix& fu) const {
    jac_(x, u, fx, fu);
  }

 private:
  void check(const Vector& x, const Vector& u) const;

  std::string name_;
  int n_;
  int m_;
  Dynamics f_;
  JacobianFn jac_;
  ControlBounds bounds_;
  double lipschitz_;
};

Vector eval_dynamics(const ControlModel& model, const Vector& x, const Vector& u);
Jacobians eval_jacobians(const ControlModel& model, const Vector& x, const Vector& u);

/// x1' = x2, x2' = sin(x1) + 0.3 u, |u| <= 1. Upright position is x = 0.
ControlModel pendulum_model();

struct CartPoleParams {
  double b2 = 0.4256;
  double b3 = 3.1564e-4;
  double c4 = 11.2135;
  double u_max = 3.9351;
};

/// Non-dimensional cart-pole; state (cart position, pole angle, cart speed,
/// pole speed), upright at the origin.
ControlModel cartpole_model(const CartPoleParams& params = {});

/// x' = A x + B u with the given control box. Used for tests and as a
/// reference plant with exactly known behaviour.
ControlModel linear_model(const Matrix& A, const Matrix& B, ControlBounds bounds,
                          std::string name = "linear");

/// Feedback law u = policy(x); used for rollouts and initial guesses.
using Policy = std::function<Vector(const Vector&)>;

/// u = clamp(K x).
Policy linear_feedback(const Matrix& K, const ControlBounds& bounds);

/// Energy-pumping swing-up for the pendulum: bang-bang on the swing velocity
/// until the upright energy level is reached, then coast, and hand over to
/// u = K x once x' H x < catch_level.
Policy pendulum_swing_up_policy(const Matrix& K, const Matrix& H, double catch_level);

}  // namespace qtorhc
