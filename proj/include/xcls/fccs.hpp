#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xcls/matrix.hpp"

namespace xcls {

/// Fast continuous convergence schedule: linear learning-rate warm-up to a
/// constant, plus a continuous cosine batch-size curve that replaces
/// learning-rate decay. `t` is measured in `unit`s (epochs by default).
struct FccsSchedule {
  enum class Unit { kIteration, kEpoch };

  double eta0 = 0.4;          // plateau learning rate
  double t_warm = 1.0;        // warm-up length
  std::uint64_t b0 = 64;      // initial batch size
  double t_ini = 1.0;         // batch growth start
  double t_final = 8.0;       // batch growth end
  std::uint64_t b_min1 = 64;  // cosine endpoints
  std::uint64_t b_max1 = 4096;
  bool increasing_variant = true;  // grow the batch (the prose); false keeps
                                   // the printed decreasing curve
  Unit unit = Unit::kEpoch;

  void validate() const;
};

/// (t/T_warm)*eta0 below T_warm, eta0 afterwards.
double learning_rate(const FccsSchedule& s, double t);

/// B0 before T_ini, floor(f(t)) afterwards with t clamped at T_final.
/// f(t) = B1_min + (1/2)(B1_max - B1_min)(1 +/- cos(pi (t-T_ini)/(T_final-T_ini)));
/// the increasing variant uses the minus sign so the batch grows.
std::uint64_t batch_size(const FccsSchedule& s, double t);

/// Layer-wise multiplier for the global rate, from the cited LARS rule:
/// trust * |w| / (|g| + weight_decay*|w| + epsilon).
struct LarsConfig {
  double trust_coefficient = 0.001;
  double weight_decay = 0.0;
  double epsilon = 1e-9;
};
double lars_local_lr(const LarsConfig& cfg, double w_norm, double g_norm);

/// Mean of micro-batch mean-gradients. With mean-reduced losses over
/// equal-size micro-batches this equals the combined-batch gradient.
DenseMatrix accumulate_gradients(std::size_t n, std::span<const DenseMatrix> micro_grads);

/// v <- momentum*v + grad + weight_decay*params; params <- params - lr*v.
class SgdMomentum {
 public:
  SgdMomentum(float momentum, float weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(DenseMatrix& params, const DenseMatrix& grad, float lr);
  /// Row-sparse variant: only the listed rows are touched, each with its own
  /// velocity row. Untouched rows keep parameters and velocity unchanged.
  void step_rows(DenseMatrix& params, const DenseMatrix& grad, float lr,
                 std::span<const std::uint32_t> rows);

  float momentum() const { return momentum_; }
  float weight_decay() const { return weight_decay_; }
  const DenseMatrix& velocity() const { return velocity_; }

 private:
  void ensure_state(const DenseMatrix& params);
  float momentum_;
  float weight_decay_;
  DenseMatrix velocity_;
};

/// Standard Adam, used only as a comparison optimizer.
class Adam {
 public:
  Adam(float beta1 = 0.9f, float beta2 = 0.999f, float epsilon = 1e-8f)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  void step(DenseMatrix& params, const DenseMatrix& grad, float lr);

 private:
  float beta1_, beta2_, epsilon_;
  std::uint64_t t_ = 0;
  DenseMatrix m_, v_;
};

/// CSV dump of (step, lr, batch_size) over integer steps [0, t_max].
std::string dump_schedule_csv(const FccsSchedule& s, std::uint64_t t_max);

}  // namespace xcls
