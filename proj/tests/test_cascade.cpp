#include <doctest.h>

#include <cmath>

#include "lmloc/cascade.hpp"
#include "lmloc/rng.hpp"

using namespace lmloc;

namespace {

// 32^3 base volume at 1mm with a bright blob, downsampled to [4,2,1]mm.
std::vector<PyramidLevel> make_pyramid(std::uint64_t seed, Vec3 base_origin = {0, 0, 0}) {
  Volume base({32, 32, 32}, {1, 1, 1}, base_origin);
  Rng rng(seed);
  for (auto& v : base.data) v = rng.uniform(0.0, 0.1);
  for (int z = 12; z < 20; ++z)
    for (int y = 12; y < 20; ++y)
      for (int x = 12; x < 20; ++x) base.at(x, y, z) += 1.0;
  std::vector<PyramidLevel> pyr;
  pyr.push_back(PyramidLevel::from_volume(downsample(base, 4)));
  pyr.push_back(PyramidLevel::from_volume(downsample(base, 2)));
  pyr.push_back(PyramidLevel::from_volume(base));
  return pyr;
}

CascadeConfig small_cfg() {
  CascadeConfig cfg;
  cfg.scales_mm = {4, 2, 1};
  cfg.patch_dims = {8, 8, 8};
  cfg.noise_amplitude_mm = 3.0;
  cfg.locnet.depth = 2;
  cfg.locnet.base_channels = 2;
  return cfg;
}

}  // namespace

TEST_CASE("loss_weights reproduces the scheduled breakpoints") {
  ScheduleConfig sched = default_schedule(4, 500);
  auto w0 = loss_weights(0, sched);
  CHECK(w0 == std::vector<double>{1, 0, 0, 0});
  auto w500 = loss_weights(500, sched);
  CHECK(w500 == std::vector<double>{0, 0, 0, 1});
  auto w250 = loss_weights(250, sched);
  CHECK(w250[0] == doctest::Approx(0.5));
  CHECK(w250[1] == doctest::Approx(1.0));
  CHECK(w250[2] == doctest::Approx(1.0));
  CHECK(w250[3] == doctest::Approx(0.5));

  SUBCASE("clamps beyond total epochs") {
    CHECK(loss_weights(700, sched) == std::vector<double>{0, 0, 0, 1});
  }
  SUBCASE("continuous: max jump between consecutive epochs < 0.011") {
    auto prev = loss_weights(0, sched);
    for (int e = 1; e <= 520; ++e) {
      auto cur = loss_weights(e, sched);
      for (std::size_t s = 0; s < cur.size(); ++s)
        CHECK(std::abs(cur[s] - prev[s]) < 0.011);
      prev = cur;
    }
  }
  SUBCASE("nonnegative with at least one positive weight at every epoch") {
    for (int e = 0; e <= 500; e += 10) {
      auto w = loss_weights(e, sched);
      double mx = 0;
      for (double v : w) {
        CHECK(v >= 0.0);
        mx = std::max(mx, v);
      }
      CHECK(mx > 0.0);
    }
  }
}

TEST_CASE("paper-default geometry: 448^3 at 0.5mm is exactly 56^3 at 4mm") {
  // the coarsest Loc-Net input equals the default patch size
  CHECK(448 * 0.5 / 4.0 == doctest::Approx(56));
  CascadeConfig cfg;  // defaults: scales [4,2,1,0.5], patch 56^3
  cfg.validate();
  CHECK(cfg.patch_dims == Dims3{56, 56, 56});
}

TEST_CASE("cascade_forward determinism and noise modes") {
  CascadeConfig cfg = small_cfg();
  CascadeModel model = build_cascade(cfg, 2, 11);
  auto pyr = make_pyramid(3);

  SUBCASE("noise off twice gives identical outputs") {
    Tape<float> t1, t2;
    auto o1 = cascade_forward(t1, model, pyr, NoiseSpec::off());
    auto o2 = cascade_forward(t2, model, pyr, NoiseSpec::off());
    for (int l = 0; l < 2; ++l) {
      CHECK(o1.final_pred(l).x == o2.final_pred(l).x);
      CHECK(o1.final_pred(l).y == o2.final_pred(l).y);
      CHECK(o1.final_pred(l).z == o2.final_pred(l).z);
    }
  }
  SUBCASE("fixed offset shifts the finest crop center exactly") {
    Tape<float> t;
    const Vec3 v{1.5, -2.0, 0.5};
    auto out = cascade_forward(t, model, pyr, NoiseSpec::fixed(v));
    for (int l = 0; l < 2; ++l) {
      Vec3 prev = point_value(out.preds[1][static_cast<std::size_t>(l)]);
      Vec3 used = out.crop_centers[2][static_cast<std::size_t>(l)];
      CHECK(used.x == doctest::Approx(prev.x + v.x));
      CHECK(used.y == doctest::Approx(prev.y + v.y));
      CHECK(used.z == doctest::Approx(prev.z + v.z));
    }
    // noise off at non-finest scales: crop center equals previous prediction
    for (int l = 0; l < 2; ++l) {
      Vec3 prev = point_value(out.preds[0][static_cast<std::size_t>(l)]);
      Vec3 used = out.crop_centers[1][static_cast<std::size_t>(l)];
      CHECK(used.x == prev.x);
    }
  }
  SUBCASE("random noise requires an rng") {
    Tape<float> t;
    CHECK_THROWS(cascade_forward(t, model, pyr, NoiseSpec::train(), nullptr));
  }
  SUBCASE("predictions stay inside each scale's input world bounds") {
    Tape<float> t;
    Rng rng(5);
    auto out = cascade_forward(t, model, pyr, NoiseSpec::train(), &rng);
    for (std::size_t s = 0; s < out.preds.size(); ++s)
      for (int l = 0; l < 2; ++l) {
        Vec3 p = point_value(out.preds[s][static_cast<std::size_t>(l)]);
        if (s == 0) {
          for (int d = 0; d < 3; ++d) {
            CHECK(p[d] >= pyr[0].origin[d] - 1e-3);
            CHECK(p[d] <= pyr[0].origin[d] + (pyr[0].dims[d] - 1) * pyr[0].spacing[d] + 1e-3);
          }
        } else {
          const Vec3 c = out.crop_centers[s][static_cast<std::size_t>(l)];
          for (int d = 0; d < 3; ++d) {
            const double half = 0.5 * (cfg.patch_dims[d] - 1) * cfg.scales_mm[s];
            CHECK(p[d] >= c[d] - half - 1e-3);
            CHECK(p[d] <= c[d] + half + 1e-3);
          }
        }
      }
  }
}

TEST_CASE("cascade world-frame mismatch is rejected") {
  CascadeConfig cfg = small_cfg();
  CascadeModel model = build_cascade(cfg, 1, 1);
  auto pyr = make_pyramid(3);
  pyr[1].origin.x += 5.0;  // break shared frame
  Tape<float> t;
  CHECK_THROWS(cascade_forward(t, model, pyr, NoiseSpec::off()));
}

TEST_CASE("whole-cascade shift equivariance through the geometry") {
  CascadeConfig cfg = small_cfg();
  CascadeModel model = build_cascade(cfg, 2, 23);
  auto pyr0 = make_pyramid(7, {0, 0, 0});
  const Vec3 t{16.0, -8.0, 4.0};
  auto pyr1 = make_pyramid(7, t);

  Tape<float> t1, t2;
  auto o0 = cascade_forward(t1, model, pyr0, NoiseSpec::off());
  auto o1 = cascade_forward(t2, model, pyr1, NoiseSpec::off());
  for (std::size_t s = 0; s < o0.preds.size(); ++s)
    for (int l = 0; l < 2; ++l) {
      Vec3 a = point_value(o0.preds[s][static_cast<std::size_t>(l)]);
      Vec3 b = point_value(o1.preds[s][static_cast<std::size_t>(l)]);
      CHECK(std::abs(b.x - a.x - t.x) < 1e-3);
      CHECK(std::abs(b.y - a.y - t.y) < 1e-3);
      CHECK(std::abs(b.z - a.z - t.z) < 1e-3);
    }
}

TEST_CASE("cross-scale gradient flow reaches the coarsest net") {
  CascadeConfig cfg = small_cfg();
  auto pyr = make_pyramid(13);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    CascadeModel model = build_cascade(cfg, 1, seed);
    Tape<float> t;
    auto out = cascade_forward(t, model, pyr, NoiseSpec::off());
    // all loss weight on the finest scale
    auto* loss = cascade_loss(t, out, {{14.0, 15.0, 16.0}}, {0, 0, 1});
    t.backward(loss);
    CHECK(model.nets[0][0].grad_norm() > 0.0);
  }
}

TEST_CASE("multi-step detachment severs gradient flow to coarser scales") {
  CascadeConfig cfg = small_cfg();
  CascadeModel model = build_cascade(cfg, 1, 4);
  auto pyr = make_pyramid(13);
  Tape<float> t;
  auto out = cascade_forward(t, model, pyr, NoiseSpec::off(), nullptr,
                             /*detach_centers=*/true);
  auto* loss = cascade_loss(t, out, {{14.0, 15.0, 16.0}}, {0, 0, 1});
  t.backward(loss);
  CHECK(model.nets[0][0].grad_norm() == 0.0);
  CHECK(model.nets[2][0].grad_norm() > 0.0);
}

TEST_CASE("cascade_loss arithmetic") {
  Tape<float> t;
  CascadeOutput out;
  out.preds.push_back({point_leaf<float>(t, {3, 4, 0}, true)});
  std::vector<WorldPoint> gt = {{0, 0, 0}};

  SUBCASE("pred equals gt -> 0") {
    CascadeOutput o2;
    o2.preds.push_back({point_leaf<float>(t, {1, 2, 3}, true)});
    auto* loss = cascade_loss(t, o2, {{1, 2, 3}}, {1});
    CHECK(loss->value[0] == 0.0f);
  }
  SUBCASE("3-4-5 squared distance") {
    auto* loss = cascade_loss(t, out, gt, {1});
    CHECK(loss->value[0] == doctest::Approx(25.0));
  }
  SUBCASE("doubling weights doubles the loss") {
    auto* l1 = cascade_loss(t, out, gt, {0.7});
    auto* l2 = cascade_loss(t, out, gt, {1.4});
    CHECK(l2->value[0] == doctest::Approx(2.0 * l1->value[0]));
  }
}

TEST_CASE("heatmap_target Gaussian") {
  GridGeometry geom{{1, 1, 1}, {0, 0, 0}};
  WorldPoint gt{8, 8, 8};
  Volume hm = heatmap_target(geom, {16, 16, 16}, gt, 6.0);
  SUBCASE("peak 1 at the landmark voxel") {
    CHECK(hm.at(8, 8, 8) == doctest::Approx(1.0));
  }
  SUBCASE("one-sigma value") {
    CHECK(hm.at(14, 8, 8) == doctest::Approx(std::exp(-0.5)));
    CHECK(hm.at(8, 2, 8) == doctest::Approx(std::exp(-0.5)));
  }
  SUBCASE("monotone decrease with distance") {
    for (int x = 9; x < 16; ++x) CHECK(hm.at(x, 8, 8) < hm.at(x - 1, 8, 8));
  }
  SUBCASE("sigma must be positive") {
    CHECK_THROWS(heatmap_target(geom, {4, 4, 4}, gt, 0.0));
  }
}
