#include <doctest.h>

#include <cmath>

#include "lmloc/diffgraph.hpp"
#include "lmloc/gradcheck.hpp"
#include "lmloc/gradcheck_suite.hpp"
#include "lmloc/rng.hpp"

using namespace lmloc;

TEST_CASE("conv3d identity kernel") {
  Tape<double> t;
  Rng rng(1);
  std::vector<double> xv(2 * 3 * 3 * 3);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  auto* x = t.leaf({2, 3, 3, 3}, xv.data());
  // 1x1x1 kernel acting as per-channel identity: cout=2, cin=2
  std::vector<double> wv = {1, 0, 0, 1};  // (co,ci): (0,0)=1 (0,1)=0 (1,0)=0 (1,1)=1
  auto* w = t.leaf({4, 1, 1, 1}, wv.data());
  std::vector<double> bv = {0, 0};
  auto* b = t.leaf({2, 1, 1, 1}, bv.data());
  auto* y = conv3d(t, x, w, b);
  REQUIRE(y->shape == Shape4{2, 3, 3, 3});
  for (std::size_t i = 0; i < xv.size(); ++i)
    CHECK(y->value[i] == doctest::Approx(xv[i]));
}

TEST_CASE("conv3d all-ones kernel counts taps") {
  Tape<double> t;
  std::vector<double> xv(4 * 4 * 4, 1.0);
  auto* x = t.leaf({1, 4, 4, 4}, xv.data());
  std::vector<double> wv(27, 1.0);
  auto* w = t.leaf({1, 3, 3, 3}, wv.data());
  std::vector<double> bv = {0};
  auto* b = t.leaf({1, 1, 1, 1}, bv.data());
  auto* y = conv3d(t, x, w, b, 1, 1);
  // interior voxel: all 27 taps inside
  CHECK(y->v(0, 1, 1, 1) == doctest::Approx(27));
  CHECK(y->v(0, 2, 2, 2) == doctest::Approx(27));
  // face-center voxel: one layer of the kernel hangs outside -> 18
  CHECK(y->v(0, 0, 1, 1) == doctest::Approx(18));
  CHECK(y->v(0, 1, 0, 2) == doctest::Approx(18));
}

TEST_CASE("conv3d shape errors") {
  Tape<double> t;
  std::vector<double> xv(8, 0.0);
  auto* x = t.leaf({1, 2, 2, 2}, xv.data());
  std::vector<double> wv(8, 0.0);
  CHECK_THROWS(conv3d(t, x, t.leaf({1, 2, 2, 2}, wv.data()),
                      t.leaf({1, 1, 1, 1}, wv.data())));  // even kernel
  std::vector<double> w3(27 * 3, 0.0);
  CHECK_THROWS(conv3d(t, x, t.leaf({3, 3, 3, 3}, w3.data()),
                      t.leaf({2, 1, 1, 1}, wv.data())));  // bias mismatch
}

TEST_CASE("relu values and gradient definition at zero") {
  Tape<double> t;
  std::vector<double> xv = {-1.0, 2.0, 0.0};
  auto* x = t.leaf({3, 1, 1, 1}, xv.data());
  auto* y = relu(t, x);
  CHECK(y->value[0] == 0.0);
  CHECK(y->value[1] == 2.0);
  CHECK(y->value[2] == 0.0);
  t.backward(y, {1.0, 1.0, 1.0});
  CHECK(x->grad[0] == 0.0);
  CHECK(x->grad[1] == 1.0);
  CHECK(x->grad[2] == 0.0);  // grad at exactly 0 defined as 0
}

TEST_CASE("maxpool2 requires even dims; constant fixed point with upsample") {
  Tape<double> t;
  std::vector<double> odd(27, 0.0);
  auto* xo = t.leaf({1, 3, 3, 3}, odd.data());
  CHECK_THROWS(maxpool2(t, xo));

  std::vector<double> cv(64, 4.5);
  auto* x = t.leaf({1, 4, 4, 4}, cv.data());
  auto* up = trilinear_upsample2(t, maxpool2(t, x));
  REQUIRE(up->shape == Shape4{1, 4, 4, 4});
  for (auto v : up->value) CHECK(v == doctest::Approx(4.5));
}

TEST_CASE("maxpool2 tie-breaking routes to lowest linear index") {
  Tape<double> t;
  std::vector<double> xv(8, 1.0);  // all tied
  auto* x = t.leaf({1, 2, 2, 2}, xv.data());
  auto* y = maxpool2(t, x);
  t.backward(y, {1.0});
  CHECK(x->grad[0] == 1.0);
  for (std::size_t i = 1; i < 8; ++i) CHECK(x->grad[i] == 0.0);
}

TEST_CASE("spatial_softmax properties") {
  SUBCASE("constant input gives uniform weights") {
    Tape<double> t;
    std::vector<double> xv(27, 0.7);
    auto* w = spatial_softmax(t, t.leaf({1, 3, 3, 3}, xv.data()), 1.0);
    for (auto v : w->value) CHECK(v == doctest::Approx(1.0 / 27));
  }
  SUBCASE("saturation") {
    Tape<double> t;
    std::vector<double> xv(64, 0.0);
    xv[13] = 100.0;
    auto* w = spatial_softmax(t, t.leaf({1, 4, 4, 4}, xv.data()), 1.0);
    CHECK(w->value[13] >= 1.0 - 1e-30);
    CHECK(1.0 - w->value[13] <= 1e-30);
  }
  SUBCASE("sums to one, strictly positive") {
    Tape<double> t;
    Rng rng(3);
    std::vector<double> xv(64);
    for (auto& v : xv) v = rng.uniform(-5, 5);
    auto* w = spatial_softmax(t, t.leaf({1, 4, 4, 4}, xv.data()), 0.5);
    double s = 0;
    for (auto v : w->value) {
      CHECK(v > 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  SUBCASE("invalid temperature") {
    Tape<double> t;
    std::vector<double> xv(8, 0.0);
    CHECK_THROWS(spatial_softmax(t, t.leaf({1, 2, 2, 2}, xv.data()), 0.0));
    CHECK_THROWS(spatial_softmax(t, t.leaf({1, 2, 2, 2}, xv.data()), -1.0));
  }
}

TEST_CASE("center_of_mass analytic examples") {
  SUBCASE("uniform weights -> grid center") {
    Tape<double> t;
    std::vector<double> wv(27, 1.0 / 27);
    auto* c = center_of_mass(t, t.leaf({1, 3, 3, 3}, wv.data()),
                             GridGeometry{{1, 1, 1}, {0, 0, 0}});
    CHECK(std::abs(c->value[0] - 1.0) < 1e-10);
    CHECK(std::abs(c->value[1] - 1.0) < 1e-10);
    CHECK(std::abs(c->value[2] - 1.0) < 1e-10);
  }
  SUBCASE("one-hot -> that voxel's world center") {
    Tape<double> t;
    std::vector<double> wv(5 * 5 * 5, 0.0);
    // voxel (4,2,0), spacing 2 -> world (8,4,0)
    wv[4 + 5 * (2 + 5 * 0)] = 1.0;
    auto* c = center_of_mass(t, t.leaf({1, 5, 5, 5}, wv.data()),
                             GridGeometry{{2, 2, 2}, {0, 0, 0}});
    CHECK(std::abs(c->value[0] - 8.0) < 1e-10);
    CHECK(std::abs(c->value[1] - 4.0) < 1e-10);
    CHECK(std::abs(c->value[2] - 0.0) < 1e-10);
  }
  SUBCASE("two-point weighted mean") {
    Tape<double> t;
    std::vector<double> wv(5 * 1 * 1, 0.0);
    wv[0] = 0.25;
    wv[4] = 0.75;
    auto* c = center_of_mass(t, t.leaf({1, 5, 1, 1}, wv.data()),
                             GridGeometry{{1, 1, 1}, {0, 0, 0}});
    CHECK(std::abs(c->value[0] - 3.0) < 1e-10);
    CHECK(std::abs(c->value[1] - 0.0) < 1e-10);
    CHECK(std::abs(c->value[2] - 0.0) < 1e-10);
  }
  SUBCASE("degenerate weights rejected") {
    Tape<double> t;
    std::vector<double> wv(8, 0.0);
    CHECK_THROWS(center_of_mass(t, t.leaf({1, 2, 2, 2}, wv.data()),
                                GridGeometry{}));
  }
}

TEST_CASE("center_of_mass origin translation is exact") {
  Rng rng(17);
  std::vector<double> wv(64);
  for (auto& v : wv) v = rng.uniform(0.1, 1.0);
  const Vec3 shift{12.5, -3.25, 7.75};
  Tape<double> t;
  auto* c0 = center_of_mass(t, t.leaf({1, 4, 4, 4}, wv.data()),
                            GridGeometry{{1.5, 1, 2}, {3, 4, 5}});
  auto* c1 = center_of_mass(
      t, t.leaf({1, 4, 4, 4}, wv.data()),
      GridGeometry{{1.5, 1, 2}, {3 + shift.x, 4 + shift.y, 5 + shift.z}});
  // origin enters additively, so the translation is exact float addition
  CHECK(c1->value[0] == c0->value[0] + shift.x);
  CHECK(c1->value[1] == c0->value[1] + shift.y);
  CHECK(c1->value[2] == c0->value[2] + shift.z);
}

TEST_CASE("diff_crop_resample exact copy at aligned centers") {
  Tape<double> t;
  Rng rng(5);
  std::vector<double> sv(6 * 6 * 6);
  for (auto& v : sv) v = rng.uniform(-3, 3);
  auto* src = t.leaf({1, 6, 6, 6}, sv.data());
  GridGeometry g{{1, 1, 1}, {0, 0, 0}};
  // 3^3 patch centered on voxel (2,2,2), same spacing -> exact sub-block
  auto* center = point_leaf(t, Vec3{2, 2, 2});
  auto* out = diff_crop_resample(t, src, g, center, {3, 3, 3}, {1, 1, 1});
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x)
        CHECK(out->v(0, x, y, z) ==
              doctest::Approx(sv[(x + 1) + 6 * ((y + 1) + 6 * (z + 1))]).epsilon(1e-12));
}

TEST_CASE("diff_crop_resample reproduces affine fields; d/dcenter = 1") {
  // source values f(p) = p.x (world mm)
  Volume srcv({8, 8, 8}, {1.5, 1.5, 1.5}, {-2, 0, 1});
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        srcv.at(x, y, z) = static_cast<float>(voxel_to_world(srcv, {double(x), double(y), double(z)}).x);
  Tape<double> t;
  std::vector<double> sv(srcv.data.begin(), srcv.data.end());
  auto* src = t.leaf({1, 8, 8, 8}, sv.data(), false);
  auto* center = point_leaf<double>(t, Vec3{2.8, 4.9, 6.1}, true);
  GridGeometry g{srcv.spacing, srcv.origin};
  auto* out = diff_crop_resample(t, src, g, center, {3, 3, 3}, {1.0, 1.0, 1.0});
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        const double expected = 2.8 + (x - 1) * 1.0;
        CHECK(std::abs(out->v(0, x, y, z) - expected) <=
              1e-12 * std::max(1.0, std::abs(expected)));
      }
  // seed every output with 1: d sum / d center.x = number of samples
  std::vector<double> seed(27, 1.0);
  t.backward(out, seed);
  CHECK(center->grad[0] == doctest::Approx(27.0).epsilon(1e-9));
  CHECK(center->grad[1] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("backward accumulation: second pass doubles gradients") {
  Tape<double> t;
  Rng rng(9);
  std::vector<double> xv(27);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  auto* x = t.leaf({1, 3, 3, 3}, xv.data());
  auto* w = spatial_softmax(t, x, 1.0);
  auto* c = center_of_mass(t, w, GridGeometry{{1, 1, 1}, {0, 0, 0}});
  std::vector<double> seed = {1.0, -0.5, 2.0};
  t.backward(c, seed);
  std::vector<double> first(x->grad.begin(), x->grad.end());
  t.backward(c, seed);
  for (std::size_t i = 0; i < first.size(); ++i)
    CHECK(x->grad[i] == doctest::Approx(2.0 * first[i]).epsilon(1e-12));
}

TEST_CASE("grad_check on a linear op is near-exact") {
  GradCheckSpec spec;
  spec.input_shapes = {{1, 2, 2, 2}};
  Rng rng(2);
  std::vector<double> xv(8);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  spec.input_values = {xv};
  double err = grad_check(
      [](Tape<double>& t, const std::vector<Node<double>*>& in) {
        // y = 3x via a 1^3 conv with weight 3
        std::vector<double> wv = {3.0};
        std::vector<double> bv = {0.0};
        return conv3d(t, in[0], t.leaf({1, 1, 1, 1}, wv.data()),
                      t.leaf({1, 1, 1, 1}, bv.data()));
      },
      spec);
  CHECK(err < 1e-10);
}

TEST_CASE("gradcheck suite: every op under 1e-5 across seeds") {
  auto results = run_gradcheck_suite(5);
  for (const auto& r : results) {
    INFO(r.op << " seed " << r.seed);
    CHECK(r.max_rel_err < 1e-5);
  }
}
