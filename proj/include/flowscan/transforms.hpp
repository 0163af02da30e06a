#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "flowscan/autodiff.hpp"
#include "flowscan/optim.hpp"
#include "flowscan/rng.hpp"
#include "flowscan/set_batch.hpp"

namespace flowscan {

enum class Direction { Forward, Inverse };

// Differentiable result of pushing a B x n x d batch through an invertible
// map: the transformed batch plus the per-set log |det| of the applied map.
struct FlowResult {
  autodiff::Var output;
  autodiff::Var logdet;
};

// Value-level counterpart for callers that do not need gradients.
struct TransformResult {
  SetBatch output;
  Tensor logdet;
};

// Smooth clamp to (-limit, limit); near-identity well inside the range.
autodiff::Var soft_clamp(const autodiff::Var& v, double limit);

// Invertible map over point-set batches. Both directions report the log
// Jacobian determinant of the direction actually applied, so a round trip
// sums to zero.
class Transform {
 public:
  virtual ~Transform() = default;
  virtual FlowResult forward(const autodiff::Var& x) const = 0;
  virtual FlowResult inverse(const autodiff::Var& z) const = 0;
  virtual std::string name() const = 0;
};

FlowResult apply(const Transform& t, const autodiff::Var& x, Direction direction);
TransformResult apply(const Transform& t, const SetBatch& x, Direction direction);

// Fully connected perceptron with tanh hidden layers and a linear head.
// With zero_final the head starts at zero so enclosing couplings begin as
// identity maps.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t in, std::size_t hidden,
      std::size_t out, std::size_t hidden_layers = 2, bool zero_final = true);

  // x: M x in -> M x out
  autodiff::Var operator()(const autodiff::Var& x) const;

 private:
  std::vector<autodiff::Var> weights_;
  std::vector<autodiff::Var> biases_;
};

// Partition of the d coordinate dimensions into a transformed block and the
// conditioning complement.
struct DimensionMask {
  std::vector<std::size_t> transformed;
  std::vector<std::size_t> conditioning;

  // parity 0 transforms even coordinate indices, parity 1 the odd ones.
  static DimensionMask alternating(std::size_t d, std::size_t parity);
  void validate(std::size_t d) const;
};

// Per-point affine coupling: the transformed coordinates are scaled and
// shifted by functions of the conditioning coordinates of the same point.
// The identical per-point map keeps it permutation-equivariant.
class PointwiseCoupling : public Transform {
 public:
  PointwiseCoupling(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d,
                    DimensionMask mask, std::size_t hidden = 64);
  FlowResult forward(const autodiff::Var& x) const override;
  FlowResult inverse(const autodiff::Var& z) const override;
  std::string name() const override { return "coupling"; }

 private:
  FlowResult affine(const autodiff::Var& x, Direction direction) const;

  std::size_t d_;
  DimensionMask mask_;
  Mlp net_;
};

// Order-invariant embedding of a point set: per-point features, mean pool
// over the set, then a second perceptron.
class SetEmbedding {
 public:
  SetEmbedding() = default;
  SetEmbedding(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t in,
               std::size_t hidden = 64, std::size_t out = 32);

  // x: B x n x in -> B x out
  autodiff::Var operator()(const autodiff::Var& x) const;
  std::size_t out_dim() const { return out_; }

 private:
  Mlp point_net_;
  Mlp post_net_;
  std::size_t out_ = 0;
};

// Coupling whose scale and shift see both the conditioning coordinates of
// the point and an order-invariant embedding of the whole conditioning set.
class SetCoupling : public Transform {
 public:
  SetCoupling(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d,
              DimensionMask mask, std::size_t hidden = 64, std::size_t embed_dim = 32);
  FlowResult forward(const autodiff::Var& x) const override;
  FlowResult inverse(const autodiff::Var& z) const override;
  std::string name() const override { return "set_coupling"; }

 private:
  FlowResult affine(const autodiff::Var& x, Direction direction) const;

  std::size_t d_;
  DimensionMask mask_;
  SetEmbedding embed_;
  Mlp net_;
};

// Elementwise leaky rectifier, invertible for any positive slope. The log
// determinant counts negative entries per set.
class LeakyReluFlow : public Transform {
 public:
  explicit LeakyReluFlow(double slope);
  FlowResult forward(const autodiff::Var& x) const override;
  FlowResult inverse(const autodiff::Var& z) const override;
  std::string name() const override { return "leaky_relu"; }

 private:
  double slope_;
};

// Per-dimension map y_i = lambda * x_i + gamma * mean(x). Stored as
// lambda = exp(a) and lambda + gamma = exp(b), which keeps the map
// invertible for any parameter values and makes the log determinant
// (n-1) * a + b per dimension.
class EquivariantLinear : public Transform {
 public:
  EquivariantLinear(ParamStore& store, const std::string& prefix, std::size_t d);
  // Converts raw scale/mean-weight pairs; rejects values our positive
  // parameterization cannot represent (lambda <= 0 or lambda + gamma <= 0).
  static std::shared_ptr<EquivariantLinear> from_raw(ParamStore& store, const std::string& prefix,
                                                     const std::vector<double>& lambda,
                                                     const std::vector<double>& gamma);
  FlowResult forward(const autodiff::Var& x) const override;
  FlowResult inverse(const autodiff::Var& z) const override;
  std::string name() const override { return "eq_linear"; }

 private:
  std::size_t d_;
  autodiff::Var a_;
  autodiff::Var b_;
};

// Like EquivariantLinear but the mean is softmax-weighted with a learned
// inverse temperature per dimension; beta = 0 recovers the plain mean, and
// large |beta| shifts by the max or min. The log determinant is the same as
// the linear map's.
class EquivariantSoftmaxMean : public Transform {
 public:
  EquivariantSoftmaxMean(ParamStore& store, const std::string& prefix, std::size_t d);
  FlowResult forward(const autodiff::Var& x) const override;
  FlowResult inverse(const autodiff::Var& z) const override;
  std::string name() const override { return "eq_softmax"; }

 private:
  std::size_t d_;
  autodiff::Var a_;
  autodiff::Var b_;
  autodiff::Var beta_;
};

// Ordered stack of transforms; log determinants add. Inverse applies the
// reversed stack of inverses.
class Compose : public Transform {
 public:
  Compose() = default;
  explicit Compose(std::vector<std::shared_ptr<Transform>> layers);
  void push_back(std::shared_ptr<Transform> layer);
  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }

  FlowResult forward(const autodiff::Var& x) const override;
  FlowResult inverse(const autodiff::Var& z) const override;
  std::string name() const override { return "compose"; }

 private:
  std::vector<std::shared_ptr<Transform>> layers_;
};

namespace testing {
// Fault-injection hook: added to every EquivariantLinear log determinant.
// Lets the verification command prove it would catch a wrong Jacobian.
extern double eq_linear_logdet_offset;
}  // namespace testing

}  // namespace flowscan
