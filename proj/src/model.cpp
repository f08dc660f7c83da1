#include "qtorhc/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "qtorhc/errors.hpp"

namespace qtorhc {

ControlBounds::ControlBounds(Vector u_min, Vector u_max)
    : lower_(std::move(u_min)), upper_(std::move(u_max)) {
  if (lower_.size() != upper_.size() || lower_.size() == 0) {
    throw DimensionError("control bounds: u_min and u_max must have the same nonzero length");
  }
  for (Eigen::Index i = 0; i < lower_.size(); ++i) {
    if (!(lower_[i] < 0.0) || !(upper_[i] > 0.0)) {
      std::ostringstream msg;
      msg << "control bounds: need u_min < 0 < u_max componentwise, got [" << lower_[i]
          << ", " << upper_[i] << "] at component " << i;
      throw Error(msg.str());
    }
  }
}

ControlBounds ControlBounds::symmetric(int m, double limit) {
  return ControlBounds(Vector::Constant(m, -limit), Vector::Constant(m, limit));
}

bool ControlBounds::contains(const Vector& u) const {
  return u.size() == lower_.size() && (u.array() >= lower_.array()).all() &&
         (u.array() <= upper_.array()).all();
}

Vector clamp_control(const ControlBounds& bounds, const Vector& u) {
  if (u.size() != bounds.dim()) {
    throw DimensionError("clamp_control: control has wrong dimension");
  }
  return u.cwiseMax(bounds.lower()).cwiseMin(bounds.upper());
}

ControlModel::ControlModel(std::string name, int n, int m, Dynamics f, JacobianFn jac,
                           ControlBounds bounds, double lipschitz)
    : name_(std::move(name)),
      n_(n),
      m_(m),
      f_(std::move(f)),
      jac_(std::move(jac)),
      bounds_(std::move(bounds)),
      lipschitz_(lipschitz) {
  if (n_ <= 0 || m_ <= 0) throw DimensionError("model dimensions must be positive");
  if (bounds_.dim() != m_) throw DimensionError("model: bounds dimension differs from m");
  if (!(lipschitz_ > 0.0)) throw Error("model: Lipschitz constant must be positive");
}

void ControlModel::check(const Vector& x, const Vector& u) const {
  if (x.size() != n_ || u.size() != m_) {
    std::ostringstream msg;
    msg << name_ << ": expected state of size " << n_ << " and control of size " << m_
        << ", got " << x.size() << " and " << u.size();
    throw DimensionError(msg.str());
  }
}

Vector ControlModel::eval(const Vector& x, const Vector& u) const {
  check(x, u);
  Vector dx(n_);
  f_(x, u, dx);
  return dx;
}

Jacobians ControlModel::jacobians(const Vector& x, const Vector& u) const {
  check(x, u);
  Jacobians j{Matrix::Zero(n_, n_), Matrix::Zero(n_, m_)};
  jac_(x, u, j.fx, j.fu);
  return j;
}

Vector eval_dynamics(const ControlModel& model, const Vector& x, const Vector& u) {
  return model.eval(x, u);
}

Jacobians eval_jacobians(const ControlModel& model, const Vector& x, const Vector& u) {
  return model.jacobians(x, u);
}

ControlModel pendulum_model() {
  auto f = [](const Vector& x, const Vector& u, Vector& dx) {
    dx[0] = x[1];
    dx[1] = std::sin(x[0]) + 0.3 * u[0];
  };
  auto jac = [](const Vector& x, const Vector&, Matrix& fx, Matrix& fu) {
    fx(0, 0) = 0.0;
    fx(0, 1) = 1.0;
    fx(1, 0) = std::cos(x[0]);
    fx(1, 1) = 0.0;
    fu(0, 0) = 0.0;
    fu(1, 0) = 0.3;
  };
  // |cos| <= 1 plus the unit x2 coupling gives ||fx||_2 <= 1; 1.5 leaves margin.
  return ControlModel("pendulum", 2, 1, f, jac, ControlBounds::symmetric(1, 1.0), 1.5);
}

namespace {

void cartpole_rhs(const CartPoleParams& p, const Vector& x, const Vector& u, Vector& dx) {
  const double s = std::sin(x[1]);
  const double c = std::cos(x[1]);
  const double d = p.c4 - c * c;
  const double v1 = u[0] - x[3] * x[3] * s - p.b2 * x[2];
  const double v2 = s - p.b3 * x[3];
  dx[0] = x[2];
  dx[1] = x[3];
  dx[2] = (v1 + v2 * c) / d;
  dx[3] = (v1 * c + p.c4 * v2) / d;
}

void cartpole_jac(const CartPoleParams& p, const Vector& x, const Vector&u, Matrix& fx,
                  Matrix& fu) {
  const double s = std::sin(x[1]);
  const double c = std::cos(x[1]);
  const double d = p.c4 - c * c;
  const double dd = 2.0 * c * s;  // d/dx2 of d
  const double v1 = u[0] - x[3] * x[3] * s - p.b2 * x[2];
  const double v2 = s - p.b3 * x[3];
  const double n3 = v1 + v2 * c;
  const double n4 = v1 * c + p.c4 * v2;

  const double dn3_dx2 = -x[3] * x[3] * c + c * c - v2 * s;
  const double dn3_dx3 = -p.b2;
  const double dn3_dx4 = -2.0 * x[3] * s - p.b3 * c;
  const double dn4_dx2 = -x[3] * x[3] * c * c - v1 * s + p.c4 * c;
  const double dn4_dx3 = -p.b2 * c;
  const double dn4_dx4 = -2.0 * x[3] * s * c - p.c4 * p.b3;

  fx.setZero();
  fx(0, 2) = 1.0;
  fx(1, 3) = 1.0;
  fx(2, 1) = (dn3_dx2 * d - n3 * dd) / (d * d);
  fx(2, 2) = dn3_dx3 / d;
  fx(2, 3) = dn3_dx4 / d;
  fx(3, 1) = (dn4_dx2 * d - n4 * dd) / (d * d);
  fx(3, 2) = dn4_dx3 / d;
  fx(3, 3) = dn4_dx4 / d;

  fu.setZero();
  fu(2, 0) = 1.0 / d;
  fu(3, 0) = c / d;
}

// Sampled bound on ||fx||_2 over the operating box, times 1.2.
double cartpole_lipschitz(const CartPoleParams& p) {
  std::mt19937_64 rng(20240611);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const Vector box = (Vector(4) << 2.0, M_PI, 3.0, 3.0).finished();
  Matrix fx(4, 4), fu(4, 1);
  Vector x(4), u(1);
  double worst = 0.0;
  for (int i = 0; i < 2000; ++i) {
    for (int j = 0; j < 4; ++j) x[j] = box[j] * unit(rng);
    u[0] = p.u_max * unit(rng);
    cartpole_jac(p, x, u, fx, fu);
    worst = std::max(worst, fx.jacobiSvd().singularValues()[0]);
  }
  return 1.2 * worst;
}

}  // namespace

ControlModel cartpole_model(const CartPoleParams& params) {
  if (!(params.c4 > 1.0)) throw Error("cartpole: c4 must exceed 1 so that d(x) > 0");
  auto f = [params](const Vector& x, const Vector& u, Vector& dx) {
    cartpole_rhs(params, x, u, dx);
  };
  auto jac = [params](const Vector& x, const Vector& u, Matrix& fx, Matrix& fu) {
    cartpole_jac(params, x, u, fx, fu);
  };
  return ControlModel("cartpole", 4, 1, f, jac, ControlBounds::symmetric(1, params.u_max),
                      cartpole_lipschitz(params));
}

ControlModel linear_model(const Matrix& A, const Matrix& B, ControlBounds bounds,
                          std::string name) {
  if (A.rows() != A.cols() || B.rows() != A.rows()) {
    throw DimensionError("linear_model: A must be n x n and B n x m");
  }
  const int n = static_cast<int>(A.rows());
  const int m = static_cast<int>(B.cols());
  auto f = [A, B](const Vector& x, const Vector& u, Vector& dx) { dx.noalias() = A * x + B * u; };
  auto jac = [A, B](const Vector&, const Vector&, Matrix& fx, Matrix& fu) {
    fx = A;
    fu = B;
  };
  const double lip = std::max(A.jacobiSvd().singularValues()[0], 1e-12);
  return ControlModel(std::move(name), n, m, f, jac, std::move(bounds), lip);
}

Policy linear_feedback(const Matrix& K, const ControlBounds& bounds) {
  return [K, bounds](const Vector& x) -> Vector { return clamp_control(bounds, K * x); };
}

Policy pendulum_swing_up_policy(const Matrix& K, const Matrix& H, double catch_level) {
  const ControlBounds bounds = ControlBounds::symmetric(1, 1.0);
  return [K, H, catch_level, bounds](const Vector& x) -> Vector {
    if (x.dot(H * x) < catch_level) return clamp_control(bounds, K * x);
    const double energy = 0.5 * x[1] * x[1] + std::cos(x[0]);
    Vector u(1);
    if (energy < 1.0) {
      u[0] = x[1] >= 0.0 ? 1.0 : -1.0;
    } else {
      u[0] = 0.0;
    }
    return u;
  };
}

}  // namespace qtorhc
