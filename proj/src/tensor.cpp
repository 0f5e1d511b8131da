#include "tck/tensor.hpp"

#include <cmath>
#include <sstream>

#include "tck/errors.hpp"

namespace tck {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e < 1) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) {
  for (double& d : data_) d = v;
}

bool Tensor::all_finite() const {
  for (double d : data_) {
    if (!std::isfinite(d)) return false;
  }
  return true;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double d : data_) s += d;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double d : data_) m = std::max(m, std::abs(d));
  return m;
}

Tensor batch_item(const Tensor& t, int index) {
  if (t.rank() < 1 || index < 0 || index >= t.dim(0)) throw ShapeError("batch index out of range");
  Shape s = t.shape();
  const std::size_t per = t.numel() / static_cast<std::size_t>(s[0]);
  s[0] = 1;
  std::vector<double> d(t.data() + per * index, t.data() + per * (index + 1));
  return Tensor(std::move(s), std::move(d));
}

Tensor stack_items(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("cannot stack zero tensors");
  Shape s = items[0].shape();
  if (!s.empty() && s[0] == 1) s.erase(s.begin());
  Shape out = s;
  out.insert(out.begin(), static_cast<int>(items.size()));
  std::vector<double> d;
  d.reserve(shape_numel(out));
  for (const Tensor& t : items) {
    if (t.numel() != shape_numel(s)) throw ShapeError("stack of mismatched tensors");
    d.insert(d.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor(std::move(out), std::move(d));
}

Tensor gather_batch(const Tensor& t, std::span<const int> indices) {
  Shape s = t.shape();
  const std::size_t per = t.numel() / static_cast<std::size_t>(s[0]);
  s[0] = static_cast<int>(indices.size());
  std::vector<double> d;
  d.reserve(per * indices.size());
  for (int i : indices) {
    if (i < 0 || i >= t.dim(0)) throw ShapeError("gather index out of range");
    d.insert(d.end(), t.data() + per * i, t.data() + per * (i + 1));
  }
  return Tensor(std::move(s), std::move(d));
}

}  // namespace tck
