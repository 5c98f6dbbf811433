// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqloom {

#if defined(SEQLOOM_REAL_DOUBLE)
using Real = double;
#else
using Real = float;
#endif

// Axes are identified by name, not position. Tensors keep their axes in this
// canonical order, so broadcasting can align axes unambiguously.
enum class Axis : std::uint8_t { Batch = 0, Beam = 1, Time = 2, Feature = 3, Other = 4 };

const char* axis_name(Axis a);

struct AxisDim {
  Axis axis;
  std::int64_t extent;
  friend bool operator==(const AxisDim&, const AxisDim&) = default;
};

using Shape = std::vector<AxisDim>;

std::string shape_to_string(const Shape& shape);
std::int64_t shape_size(const Shape& shape);

// Errors raised by shape/axis misuse carry both shapes in the message.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IndexError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major tensor over canonical named axes. seq_lens, when present,
// give the number of valid Time positions per Batch entry; contents beyond a
// sequence's length are considered masked.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, Real value);
  static Tensor scalar(Real value);
  static Tensor from_data(Shape shape, std::vector<Real> data);

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool is_scalar() const { return shape_.empty(); }

  bool has_axis(Axis a) const;
  int axis_index(Axis a) const;  // -1 when absent
  std::int64_t extent(Axis a) const;  // throws when absent

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  Real& at(std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Real at(std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  Real scalar_value() const;

  const std::optional<std::vector<std::int32_t>>& seq_lens() const { return seq_lens_; }
  void set_seq_lens(std::vector<std::int32_t> lens);
  void clear_seq_lens() { seq_lens_.reset(); }

  // Row-major strides in canonical axis order.
  std::vector<std::int64_t> strides() const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<Real> data_;
  std::optional<std::vector<std::int32_t>> seq_lens_;

  void check_invariants() const;
};

// Integer-valued companion for token ids. Ids never carry gradients.
class IdTensor {
 public:
  IdTensor() = default;
  static IdTensor zeros(Shape shape);
  static IdTensor from_data(Shape shape, std::vector<std::int32_t> data);

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool has_axis(Axis a) const;
  int axis_index(Axis a) const;
  std::int64_t extent(Axis a) const;

  std::span<std::int32_t> data() { return data_; }
  std::span<const std::int32_t> data() const { return data_; }

  const std::optional<std::vector<std::int32_t>>& seq_lens() const { return seq_lens_; }
  void set_seq_lens(std::vector<std::int32_t> lens);

  // Drop the Time axis, keeping position t.
  IdTensor slice_time(std::int64_t t) const;

 private:
  Shape shape_;
  std::vector<std::int32_t> data_;
  std::optional<std::vector<std::int32_t>> seq_lens_;
};

// Broadcasting plan between two shapes: axes align by name, an axis may be
// absent or extent-1 on one side. Used by elementwise ops and their backward.
struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::int64_t> lhs_strides;  // per out axis, 0 where broadcast
  std::vector<std::int64_t> rhs_strides;
};

BroadcastPlan make_broadcast_plan(const Shape& lhs, const Shape& rhs);

// Sum g over the axes that `target` lacks (or has at extent 1), producing a
// tensor of shape `target`. The adjoint of broadcasting.
Tensor reduce_to_shape(const Tensor& g, const Shape& target);

}  // namespace seqloom
