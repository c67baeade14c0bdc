#include "xcls/fccs.hpp"

#include <cmath>
#include <sstream>

namespace xcls {

void FccsSchedule::validate() const {
  if (eta0 <= 0.0) throw InvalidArgument("FccsSchedule: eta0 must be positive");
  if (t_warm < 0.0) throw InvalidArgument("FccsSchedule: t_warm must be nonnegative");
  if (t_ini > t_final) throw InvalidArgument("FccsSchedule: t_ini must be <= t_final");
  if (b_min1 > b_max1) throw InvalidArgument("FccsSchedule: b_min1 must be <= b_max1");
  if (b0 == 0 || b_min1 == 0) throw InvalidArgument("FccsSchedule: batch sizes must be positive");
}

double learning_rate(const FccsSchedule& s, double t) {
  if (t < 0.0) throw InvalidArgument("learning_rate: t must be nonnegative");
  if (t < s.t_warm) return (t / s.t_warm) * s.eta0;
  return s.eta0;
}

std::uint64_t batch_size(const FccsSchedule& s, double t) {
  if (t < 0.0) throw InvalidArgument("batch_size: t must be nonnegative");
  if (t < s.t_ini) return s.b0;
  t = std::min(t, s.t_final);
  double cosine;
  if (s.t_final == s.t_ini) {
    // Degenerate window: land on the curve's endpoint.
    cosine = s.increasing_variant ? -1.0 : 1.0;
  } else {
    cosine = std::cos((t - s.t_ini) / (s.t_final - s.t_ini) * M_PI);
    if (s.increasing_variant) cosine = -cosine;
  }
  const double f = static_cast<double>(s.b_min1) +
                   0.5 * static_cast<double>(s.b_max1 - s.b_min1) * (1.0 + cosine);
  return static_cast<std::uint64_t>(std::floor(f));
}

double lars_local_lr(const LarsConfig& cfg, double w_norm, double g_norm) {
  if (w_norm < 0.0 || g_norm < 0.0) throw InvalidArgument("lars_local_lr: norms must be >= 0");
  return cfg.trust_coefficient * w_norm /
         (g_norm + cfg.weight_decay * w_norm + cfg.epsilon);
}

DenseMatrix accumulate_gradients(std::size_t n, std::span<const DenseMatrix> micro_grads) {
  if (n == 0 || micro_grads.size() != n)
    throw ShapeMismatch("accumulate_gradients: n must equal the number of micro gradients");
  DenseMatrix acc = zeros_like(micro_grads[0]);
  for (const DenseMatrix& g : micro_grads) {
    if (!g.same_shape(acc)) throw ShapeMismatch("accumulate_gradients: shape mismatch");
    axpy(acc, 1.0f, g);
  }
  const float inv = 1.0f / static_cast<float>(n);
  for (float& v : acc.data) v *= inv;
  return acc;
}

void SgdMomentum::ensure_state(const DenseMatrix& params) {
  if (velocity_.rows == 0) velocity_ = zeros_like(params);
  if (!velocity_.same_shape(params))
    throw ShapeMismatch("SgdMomentum: parameter shape changed");
}

void SgdMomentum::step(DenseMatrix& params, const DenseMatrix& grad, float lr) {
  if (!params.same_shape(grad)) throw ShapeMismatch("SgdMomentum::step: shape mismatch");
  ensure_state(params);
  for (std::size_t i = 0; i < params.data.size(); ++i) {
    const float v = momentum_ * velocity_.data[i] + grad.data[i] + weight_decay_ * params.data[i];
    velocity_.data[i] = v;
    params.data[i] -= lr * v;
  }
}

void SgdMomentum::step_rows(DenseMatrix& params, const DenseMatrix& grad, float lr,
                            std::span<const std::uint32_t> rows) {
  if (!params.same_shape(grad)) throw ShapeMismatch("SgdMomentum::step_rows: shape mismatch");
  ensure_state(params);
  for (std::uint32_t r : rows) {
    if (r >= params.rows) throw ShapeMismatch("SgdMomentum::step_rows: row out of range");
    float* p = params.data.data() + static_cast<std::size_t>(r) * params.cols;
    const float* g = grad.data.data() + static_cast<std::size_t>(r) * params.cols;
    float* vel = velocity_.data.data() + static_cast<std::size_t>(r) * params.cols;
    for (std::size_t j = 0; j < params.cols; ++j) {
      const float v = momentum_ * vel[j] + g[j] + weight_decay_ * p[j];
      vel[j] = v;
      p[j] -= lr * v;
    }
  }
}

void Adam::step(DenseMatrix& params, const DenseMatrix& grad, float lr) {
  if (!params.same_shape(grad)) throw ShapeMismatch("Adam::step: shape mismatch");
  if (m_.rows == 0) {
    m_ = zeros_like(params);
    v_ = zeros_like(params);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
  for (std::size_t i = 0; i < params.data.size(); ++i) {
    const float g = grad.data[i];
    m_.data[i] = beta1_ * m_.data[i] + (1.0f - beta1_) * g;
    v_.data[i] = beta2_ * v_.data[i] + (1.0f - beta2_) * g * g;
    const double mhat = m_.data[i] / bc1;
    const double vhat = v_.data[i] / bc2;
    params.data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + epsilon_));
  }
}

std::string dump_schedule_csv(const FccsSchedule& s, std::uint64_t t_max) {
  s.validate();
  std::ostringstream out;
  out << "step,lr,batch_size\n";
  out.precision(9);
  for (std::uint64_t t = 0; t <= t_max; ++t) {
    out << t << ',' << learning_rate(s, static_cast<double>(t)) << ','
        << batch_size(s, static_cast<double>(t)) << '\n';
  }
  return out.str();
}

}  // namespace xcls
