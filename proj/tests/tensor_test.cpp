// Copyright 2026 The seqloom Authors. Apache 2.0 License.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "seqloom/rng.hpp"
#include "seqloom/tensor.hpp"

using namespace seqloom;

TEST_CASE("shape invariants") {
  Tensor t = Tensor::zeros({{Axis::Batch, 2}, {Axis::Time, 3}, {Axis::Feature, 4}});
  CHECK(t.size() == 24);
  CHECK(t.extent(Axis::Time) == 3);
  CHECK(t.has_axis(Axis::Feature));
  CHECK(!t.has_axis(Axis::Beam));
  CHECK_THROWS_AS(t.extent(Axis::Beam), ShapeError);
  // Non-canonical order is rejected.
  CHECK_THROWS_AS(Tensor::zeros({{Axis::Feature, 2}, {Axis::Batch, 2}}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({{Axis::Batch, 0}}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_data({{Axis::Feature, 3}}, {1, 2}), ShapeError);
}

TEST_CASE("seq_lens validation") {
  Tensor t = Tensor::zeros({{Axis::Batch, 2}, {Axis::Time, 4}, {Axis::Feature, 1}});
  t.set_seq_lens({2, 4});
  CHECK(t.seq_lens().has_value());
  CHECK_THROWS_AS(t.set_seq_lens({0, 4}), ShapeError);
  CHECK_THROWS_AS(t.set_seq_lens({2, 5}), ShapeError);
  CHECK_THROWS_AS(t.set_seq_lens({2}), ShapeError);
  Tensor no_time = Tensor::zeros({{Axis::Batch, 2}, {Axis::Feature, 3}});
  CHECK_THROWS_AS(no_time.set_seq_lens({1, 1}), ShapeError);
}

TEST_CASE("broadcast plan aligns axes by name") {
  // [Batch=2, Feature=3] with [Feature=3] -> [Batch=2, Feature=3]
  auto plan = make_broadcast_plan({{Axis::Batch, 2}, {Axis::Feature, 3}}, {{Axis::Feature, 3}});
  CHECK(plan.out_shape == Shape{{Axis::Batch, 2}, {Axis::Feature, 3}});
  CHECK(plan.rhs_strides[0] == 0);
  CHECK(plan.rhs_strides[1] == 1);
  // Extent mismatch that is not 1 is an error.
  CHECK_THROWS_AS(make_broadcast_plan({{Axis::Feature, 3}}, {{Axis::Feature, 2}}), ShapeError);
}

TEST_CASE("broadcast agrees with materialized-tile oracle on random shapes") {
  RngStream rng(2024);
  for (int iter = 0; iter < 50; ++iter) {
    std::int64_t b = 1 + static_cast<std::int64_t>(rng.next_below(3));
    std::int64_t t = 1 + static_cast<std::int64_t>(rng.next_below(3));
    std::int64_t f = 1 + static_cast<std::int64_t>(rng.next_below(4));
    // lhs has all axes; rhs drops or squeezes a random subset.
    Shape ls = {{Axis::Batch, b}, {Axis::Time, t}, {Axis::Feature, f}};
    Shape rs;
    for (auto d : ls) {
      auto r = rng.next_below(3);
      if (r == 0) continue;                       // absent
      rs.push_back({d.axis, r == 1 ? 1 : d.extent});  // squeezed or full
    }
    Tensor lhs = Tensor::zeros(ls);
    for (auto& x : lhs.data()) x = static_cast<Real>(rng.next_symmetric(2.0));
    Tensor rhs = Tensor::zeros(rs);
    for (auto& x : rhs.data()) x = static_cast<Real>(rng.next_symmetric(2.0));

    auto plan = make_broadcast_plan(ls, rs);
    // Walk the output shape with the plan.
    Tensor via_plan = Tensor::zeros(plan.out_shape);
    std::vector<std::int64_t> coord(plan.out_shape.size(), 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t i = 0; i < via_plan.size(); ++i) {
      via_plan.at(i) = lhs.at(ia) + rhs.at(ib);
      for (int d = static_cast<int>(plan.out_shape.size()) - 1; d >= 0; --d) {
        coord[d]++;
        ia += plan.lhs_strides[d];
        ib += plan.rhs_strides[d];
        if (coord[d] < plan.out_shape[d].extent) break;
        ia -= plan.lhs_strides[d] * plan.out_shape[d].extent;
        ib -= plan.rhs_strides[d] * plan.out_shape[d].extent;
        coord[d] = 0;
      }
    }
    // Oracle: explicitly tile rhs to the full output shape, then add.
    auto strides_of = [](const Shape& s) {
      std::vector<std::int64_t> st(s.size(), 1);
      for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        st[i] = st[i + 1] * s[i + 1].extent;
      }
      return st;
    };
    auto out_strides = strides_of(plan.out_shape);
    auto rhs_strides = strides_of(rs);
    for (std::int64_t i = 0; i < via_plan.size(); ++i) {
      std::int64_t rem = i, r_idx = 0;
      for (std::size_t d = 0; d < plan.out_shape.size(); ++d) {
        std::int64_t c = rem / out_strides[d];
        rem %= out_strides[d];
        for (std::size_t rd = 0; rd < rs.size(); ++rd) {
          if (rs[rd].axis == plan.out_shape[d].axis) {
            r_idx += (rs[rd].extent == 1 ? 0 : c) * rhs_strides[rd];
          }
        }
      }
      std::int64_t rem2 = i, l_idx = 0;
      auto lhs_strides = strides_of(ls);
      for (std::size_t d = 0; d < plan.out_shape.size(); ++d) {
        std::int64_t c = rem2 / out_strides[d];
        rem2 %= out_strides[d];
        for (std::size_t ld = 0; ld < ls.size(); ++ld) {
          if (ls[ld].axis == plan.out_shape[d].axis) {
            l_idx += (ls[ld].extent == 1 ? 0 : c) * lhs_strides[ld];
          }
        }
      }
      CHECK(via_plan.at(i) == doctest::Approx(lhs.at(l_idx) + rhs.at(r_idx)));
    }
  }
}

TEST_CASE("reduce_to_shape sums over broadcast axes") {
  Tensor g = Tensor::from_data({{Axis::Batch, 2}, {Axis::Feature, 2}}, {1, 2, 3, 4});
  Tensor r = reduce_to_shape(g, {{Axis::Feature, 2}});
  CHECK(r.at(0) == 4);  // 1 + 3
  CHECK(r.at(1) == 6);  // 2 + 4
  Tensor r2 = reduce_to_shape(g, {{Axis::Batch, 2}, {Axis::Feature, 2}});
  CHECK(r2.at(3) == 4);
}

TEST_CASE("counter rng reproducibility") {
  RngStream a(42, "layer");
  RngStream b(42, "layer");
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  RngStream c(42, "other");
  bool same = true;
  RngStream a2(42, "layer");
  for (int i = 0; i < 10; ++i) same = same && (a2.next_u64() == c.next_u64());
  CHECK(!same);
  auto p1 = random_permutation(7, 100);
  auto p2 = random_permutation(7, 100);
  CHECK(p1 == p2);
  std::vector<bool> seen(100, false);
  for (auto i : p1) seen[i] = true;
  for (bool s : seen) CHECK(s);
}
