#include "flowscan/recurrence.hpp"

#include <cmath>

#include "flowscan/errors.hpp"

namespace flowscan {

namespace ad = autodiff;

namespace {

Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  Tensor w({fan_in, fan_out});
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < w.numel(); ++i) {
    w[i] = (2.0 * rng.uniform() - 1.0) * limit;
  }
  return w;
}

}  // namespace

GatedRecurrence::GatedRecurrence(ParamStore& store, Rng& rng, const std::string& prefix,
                                 std::size_t input_dim, std::size_t hidden, std::size_t layers)
    : hidden_(hidden), input_(input_dim) {
  if (input_dim == 0 || hidden == 0 || layers == 0) {
    throw ConfigError("recurrence needs positive input, hidden and layer sizes");
  }
  layers_.reserve(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string base = prefix + ".layer" + std::to_string(l);
    const std::size_t in = hidden + (l == 0 ? input_dim : hidden);
    Layer layer;
    layer.wu = store.param(base + ".wu", xavier(rng, in, hidden));
    layer.bu = store.param(base + ".bu", Tensor({std::size_t{1}, hidden}));
    layer.wc = store.param(base + ".wc", xavier(rng, in, hidden));
    layer.bc = store.param(base + ".bc", Tensor({std::size_t{1}, hidden}));
    layer.h0 = store.param(base + ".h0", Tensor({std::size_t{1}, hidden}));
    layers_.push_back(layer);
  }
}

std::vector<ad::Var> GatedRecurrence::initial_state(std::size_t batch) const {
  if (batch == 0) throw ShapeError("recurrence state needs a positive batch size");
  std::vector<ad::Var> state;
  state.reserve(layers_.size());
  for (const Layer& layer : layers_) {
    state.push_back(ad::repeat(layer.h0, 0, batch));
  }
  return state;
}

std::vector<ad::Var> GatedRecurrence::advance(const std::vector<ad::Var>& state,
                                              const ad::Var& input) const {
  if (state.size() != layers_.size()) {
    throw ShapeError("recurrence state has the wrong number of layers");
  }
  if (input->value.rank() != 2 || input->value.extent(1) != input_) {
    throw ShapeError("recurrence input must be batch x " + std::to_string(input_) + ", got " +
                     shape_to_string(input->value.shape()));
  }
  std::vector<ad::Var> next;
  next.reserve(layers_.size());
  ad::Var feed = input;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    ad::Var joint = ad::concat({state[l], feed}, 1);
    ad::Var update = ad::sigmoid(ad::add(ad::matmul(joint, layer.wu), layer.bu));
    ad::Var candidate = ad::tanh(ad::add(ad::matmul(joint, layer.wc), layer.bc));
    ad::Var h = ad::add(state[l], ad::mul(update, candidate));
    next.push_back(h);
    feed = h;
  }
  return next;
}

}  // namespace flowscan
