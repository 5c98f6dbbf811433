// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#include "seqloom/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace seqloom {

const char* axis_name(Axis a) {
  switch (a) {
    case Axis::Batch: return "Batch";
    case Axis::Beam: return "Beam";
    case Axis::Time: return "Time";
    case Axis::Feature: return "Feature";
    case Axis::Other: return "Other";
  }
  return "?";
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << axis_name(shape[i].axis) << "=" << shape[i].extent;
  }
  os << "]";
  return os.str();
}

std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (const auto& d : shape) n *= d.extent;
  return n;
}

namespace {

void check_canonical(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i].extent <= 0) {
      throw ShapeError("non-positive extent in shape " + shape_to_string(shape));
    }
    if (i > 0 && static_cast<int>(shape[i - 1].axis) >= static_cast<int>(shape[i].axis)) {
      throw ShapeError("axes not in canonical order / duplicated in shape " +
                       shape_to_string(shape));
    }
  }
}

int find_axis(const Shape& shape, Axis a) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i].axis == a) return static_cast<int>(i);
  }
  return -1;
}

std::vector<std::int64_t> compute_strides(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[i] = s[i + 1] * shape[i + 1].extent;
  }
  return s;
}

}  // namespace

Tensor Tensor::zeros(Shape shape) {
  check_canonical(shape);
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_.assign(static_cast<std::size_t>(shape_size(t.shape_)), Real(0));
  return t;
}

Tensor Tensor::full(Shape shape, Real value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::scalar(Real value) {
  Tensor t;
  t.data_.assign(1, value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<Real> data) {
  check_canonical(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_size(shape)) {
    throw ShapeError("buffer length " + std::to_string(data.size()) +
                     " does not match shape " + shape_to_string(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

bool Tensor::has_axis(Axis a) const { return find_axis(shape_, a) >= 0; }
int Tensor::axis_index(Axis a) const { return find_axis(shape_, a); }

std::int64_t Tensor::extent(Axis a) const {
  int i = find_axis(shape_, a);
  if (i < 0) {
    throw ShapeError(std::string("axis ") + axis_name(a) + " absent from shape " +
                     shape_to_string(shape_));
  }
  return shape_[i].extent;
}

Real Tensor::scalar_value() const {
  if (!is_scalar()) {
    throw ShapeError("scalar_value on non-scalar tensor " + shape_to_string(shape_));
  }
  return data_[0];
}

void Tensor::set_seq_lens(std::vector<std::int32_t> lens) {
  int bi = find_axis(shape_, Axis::Batch);
  int ti = find_axis(shape_, Axis::Time);
  if (bi < 0 || ti < 0) {
    throw ShapeError("seq_lens requires Batch and Time axes, shape is " +
                     shape_to_string(shape_));
  }
  if (static_cast<std::int64_t>(lens.size()) != shape_[bi].extent) {
    throw ShapeError("seq_lens count does not match Batch extent");
  }
  for (auto l : lens) {
    if (l <= 0 || l > shape_[ti].extent) {
      throw ShapeError("seq_len " + std::to_string(l) + " out of (0, Time=" +
                       std::to_string(shape_[ti].extent) + "]");
    }
  }
  seq_lens_ = std::move(lens);
}

std::vector<std::int64_t> Tensor::strides() const { return compute_strides(shape_); }

bool Tensor::all_finite() const {
  for (Real v : data_) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

IdTensor IdTensor::zeros(Shape shape) {
  check_canonical(shape);
  IdTensor t;
  t.shape_ = std::move(shape);
  t.data_.assign(static_cast<std::size_t>(shape_size(t.shape_)), 0);
  return t;
}

IdTensor IdTensor::from_data(Shape shape, std::vector<std::int32_t> data) {
  check_canonical(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_size(shape)) {
    throw ShapeError("id buffer length does not match shape " + shape_to_string(shape));
  }
  IdTensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

bool IdTensor::has_axis(Axis a) const { return find_axis(shape_, a) >= 0; }
int IdTensor::axis_index(Axis a) const { return find_axis(shape_, a); }

std::int64_t IdTensor::extent(Axis a) const {
  int i = find_axis(shape_, a);
  if (i < 0) {
    throw ShapeError(std::string("axis ") + axis_name(a) + " absent from shape " +
                     shape_to_string(shape_));
  }
  return shape_[i].extent;
}

void IdTensor::set_seq_lens(std::vector<std::int32_t> lens) {
  int bi = find_axis(shape_, Axis::Batch);
  int ti = find_axis(shape_, Axis::Time);
  if (bi < 0 || ti < 0) {
    throw ShapeError("seq_lens requires Batch and Time axes");
  }
  if (static_cast<std::int64_t>(lens.size()) != shape_[bi].extent) {
    throw ShapeError("seq_lens count does not match Batch extent");
  }
  for (auto l : lens) {
    if (l <= 0 || l > shape_[ti].extent) {
      throw ShapeError("seq_len out of range");
    }
  }
  seq_lens_ = std::move(lens);
}

IdTensor IdTensor::slice_time(std::int64_t t) const {
  int ti = find_axis(shape_, Axis::Time);
  if (ti < 0) throw ShapeError("slice_time: no Time axis");
  std::int64_t T = shape_[ti].extent;
  if (t < 0 || t >= T) throw IndexError("slice_time: step out of range");
  Shape out_shape;
  for (const auto& d : shape_) {
    if (d.axis != Axis::Time) out_shape.push_back(d);
  }
  auto strides = compute_strides(shape_);
  IdTensor out = IdTensor::zeros(out_shape);
  // Iterate the output positions, injecting the fixed Time coordinate.
  std::int64_t n = out.size();
  auto out_strides = compute_strides(out_shape);
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t rem = i, src = t * strides[ti];
    for (std::size_t d = 0, sd = 0; d < out_shape.size(); ++d, ++sd) {
      if (static_cast<int>(sd) == ti) ++sd;
      std::int64_t c = rem / out_strides[d];
      rem %= out_strides[d];
      src += c * strides[sd];
    }
    out.data()[i] = data_[static_cast<std::size_t>(src)];
  }
  return out;
}

BroadcastPlan make_broadcast_plan(const Shape& lhs, const Shape& rhs) {
  BroadcastPlan plan;
  std::size_t li = 0, ri = 0;
  while (li < lhs.size() || ri < rhs.size()) {
    bool take_l = li < lhs.size();
    bool take_r = ri < rhs.size();
    if (take_l && take_r) {
      if (static_cast<int>(lhs[li].axis) < static_cast<int>(rhs[ri].axis)) {
        take_r = false;
      } else if (static_cast<int>(rhs[ri].axis) < static_cast<int>(lhs[li].axis)) {
        take_l = false;
      }
    }
    if (take_l && take_r) {
      std::int64_t le = lhs[li].extent, re = rhs[ri].extent;
      if (le != re && le != 1 && re != 1) {
        throw ShapeError("incompatible shapes " + shape_to_string(lhs) + " and " +
                         shape_to_string(rhs));
      }
      plan.out_shape.push_back({lhs[li].axis, std::max(le, re)});
      ++li, ++ri;
    } else if (take_l) {
      plan.out_shape.push_back(lhs[li]);
      ++li;
    } else {
      plan.out_shape.push_back(rhs[ri]);
      ++ri;
    }
  }
  auto fill_strides = [&](const Shape& in, std::vector<std::int64_t>& out_strides) {
    auto in_strides = compute_strides(in);
    out_strides.assign(plan.out_shape.size(), 0);
    for (std::size_t d = 0; d < plan.out_shape.size(); ++d) {
      int idx = find_axis(in, plan.out_shape[d].axis);
      if (idx >= 0 && in[idx].extent == plan.out_shape[d].extent) {
        out_strides[d] = in_strides[idx];
      } else if (idx >= 0 && in[idx].extent != 1) {
        throw ShapeError("broadcast extent mismatch");
      }
      // absent or extent-1: stride 0
    }
  };
  fill_strides(lhs, plan.lhs_strides);
  fill_strides(rhs, plan.rhs_strides);
  return plan;
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out = Tensor::zeros(target);
  // Walk every element of g, mapping coordinates onto target (dropping axes
  // it lacks, clamping extent-1 axes to coordinate 0) and accumulating.
  const Shape& gs = g.shape();
  auto g_strides = compute_strides(gs);
  auto t_strides = compute_strides(target);
  std::vector<std::int64_t> map_stride(gs.size(), 0);
  for (std::size_t d = 0; d < gs.size(); ++d) {
    int ti = find_axis(target, gs[d].axis);
    if (ti >= 0 && target[ti].extent == gs[d].extent) {
      map_stride[d] = t_strides[ti];
    } else if (ti >= 0 && target[ti].extent != 1 && target[ti].extent != gs[d].extent) {
      throw ShapeError("reduce_to_shape: extents disagree");
    }
  }
  std::vector<std::int64_t> coord(gs.size(), 0);
  const auto src = g.data();
  auto dst = out.data();
  std::int64_t n = g.size();
  std::int64_t dst_idx = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    dst[static_cast<std::size_t>(dst_idx)] += src[static_cast<std::size_t>(i)];
    // odometer increment
    for (int d = static_cast<int>(gs.size()) - 1; d >= 0; --d) {
      coord[d]++;
      dst_idx += map_stride[d];
      if (coord[d] < gs[d].extent) break;
      dst_idx -= map_stride[d] * gs[d].extent;
      coord[d] = 0;
    }
  }
  return out;
}

void Tensor::check_invariants() const {
  check_canonical(shape_);
  if (static_cast<std::int64_t>(data_.size()) != shape_size(shape_)) {
    throw ShapeError("tensor buffer/shape mismatch");
  }
}

}  // namespace seqloom
