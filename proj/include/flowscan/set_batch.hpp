#pragma once

#include <cstddef>
#include <utility>

#include "flowscan/errors.hpp"
#include "flowscan/tensor.hpp"

namespace flowscan {

// A batch of point sets: B sets, each holding n points in d dimensions.
// Within one batch every set has the same cardinality.
struct SetBatch {
  Tensor values;

  SetBatch() = default;
  explicit SetBatch(Tensor v) : values(std::move(v)) {
    if (values.rank() != 3) {
      throw ShapeError("set batch must be B x n x d, got " + values.shape_str());
    }
    if (values.extent(1) < 1 || values.extent(2) < 1) {
      throw ShapeError("set batch needs n >= 1 and d >= 1");
    }
    if (!values.all_finite()) {
      throw NumericError("set batch contains non-finite values");
    }
  }

  std::size_t batch_size() const { return values.extent(0); }
  std::size_t cardinality() const { return values.extent(1); }
  std::size_t dim() const { return values.extent(2); }

  double at(std::size_t b, std::size_t i, std::size_t j) const {
    return values[(b * cardinality() + i) * dim() + j];
  }
  double& at(std::size_t b, std::size_t i, std::size_t j) {
    return values[(b * cardinality() + i) * dim() + j];
  }
};

}  // namespace flowscan
