#include "trojanlm/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "trojanlm/digest.hpp"

namespace trojanlm {

size_t ParameterSet::add(std::string name, int rows, int cols) {
  tensors_.push_back({std::move(name), Matrix(rows, cols)});
  return tensors_.size() - 1;
}

size_t ParameterSet::scalar_count() const {
  size_t n = 0;
  for (const auto& t : tensors_) n += t.value.size();
  return n;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& t : tensors_) out.add(t.name, t.value.rows, t.value.cols);
  return out;
}

void ParameterSet::zero() {
  for (auto& t : tensors_) t.value.zero();
}

void ParameterSet::axpy(double scale, const ParameterSet& other) {
  if (other.tensors_.size() != tensors_.size()) throw std::invalid_argument("parameter layout mismatch");
  for (size_t i = 0; i < tensors_.size(); ++i) {
    auto& dst = tensors_[i].value.data;
    const auto& src = other.tensors_[i].value.data;
    if (dst.size() != src.size()) throw std::invalid_argument("parameter layout mismatch: " + tensors_[i].name);
    for (size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
  }
}

void ParameterSet::scale(double s) {
  for (auto& t : tensors_)
    for (double& v : t.value.data) v *= s;
}

void ParameterSet::round_to_float() {
  for (auto& t : tensors_)
    for (double& v : t.value.data) v = static_cast<double>(static_cast<float>(v));
}

bool ParameterSet::finite() const {
  for (const auto& t : tensors_)
    for (double v : t.value.data)
      if (!std::isfinite(v)) return false;
  return true;
}

std::string parameter_digest(const ParameterSet& params) {
  Sha256 h;
  for (const auto& t : params.tensors()) {
    h.update(t.name);
    for (double v : t.value.data) {
      const auto bits = std::bit_cast<uint32_t>(static_cast<float>(v));
      const unsigned char le[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                   static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      h.update(le, 4);
    }
  }
  return to_hex(h.finish());
}

}  // namespace trojanlm
