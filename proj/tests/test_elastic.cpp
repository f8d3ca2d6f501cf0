#include <cmath>
#include <random>

#include "doctest.h"
#include "elastid/elastic.hpp"
#include "elastid/errors.hpp"
#include "elastid/types.hpp"

using namespace elastid;

TEST_CASE("lame conversion: nu = 0 degenerate case") {
  const auto [mu, lambda] = lame_from_elastic(1.0, 0.0);
  CHECK(mu == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(lambda == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("lame conversion: E = 1e5, nu = 0.3") {
  // mu = E / (2 * 1.3) = 38461.54, lambda = E * 0.3 / (1.3 * 0.4) = 57692.31
  const auto [mu, lambda] = lame_from_elastic(1e5, 0.3);
  CHECK(mu == doctest::Approx(3.84615384615e4).epsilon(1e-9));
  CHECK(lambda == doctest::Approx(5.76923076923e4).epsilon(1e-9));
}

TEST_CASE("lame conversion: near-incompressible growth") {
  // lambda / mu = 2 nu / (1 - 2 nu) = 0.98 / 0.02 = 49 at nu = 0.49.
  const auto [mu, lambda] = lame_from_elastic(1e5, 0.49);
  CHECK(lambda / mu == doctest::Approx(49.0).epsilon(1e-9));
  CHECK(lambda > mu);
}

TEST_CASE("lame conversion rejects bad parameters") {
  CHECK_THROWS_AS((void)lame_from_elastic(-1.0, 0.3), InvalidParameterError);
  CHECK_THROWS_AS((void)lame_from_elastic(0.0, 0.3), InvalidParameterError);
  CHECK_THROWS_AS((void)lame_from_elastic(1e5, 0.5), InvalidParameterError);
  CHECK_THROWS_AS((void)lame_from_elastic(1e5, -0.1), InvalidParameterError);
}

TEST_CASE("lame conversion strictly increasing in E") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unif(2.0, 8.0);
  for (int i = 0; i < 200; ++i) {
    const double nu = 0.05 + 0.4 * (i % 10) / 10.0;
    const double e1 = std::pow(10.0, unif(rng));
    const double e2 = e1 * 1.01;
    const auto [mu1, l1] = lame_from_elastic(e1, nu);
    const auto [mu2, l2] = lame_from_elastic(e2, nu);
    CHECK(mu2 > mu1);
    CHECK(l2 >= l1);  // equality only at nu = 0
  }
}

TEST_CASE("particle volume at the boundary midpoint") {
  const double Vg = 8e-9;
  const double V = particle_volume(0.01, -0.01, Vg, 5e3, 1e-4);
  CHECK(V == doctest::Approx(Vg * (0.5 + 1e-4)).epsilon(1e-12));
}

TEST_CASE("particle volume far outside collapses to the floor") {
  const double Vg = 8e-9;
  // sigmoid(-50) ~ 2e-22, so V ~ Vg * eps
  const double V = particle_volume(0.01, 0.0, Vg, 5e3, 1e-4);
  CHECK(V == doctest::Approx(Vg * 1e-4).epsilon(1e-6));
}

TEST_CASE("particle volume deep inside saturates") {
  const double Vg = 8e-9;
  const double V = particle_volume(-0.01, 0.0, Vg, 5e3, 1e-4);
  CHECK(V == doctest::Approx(Vg * (1.0 + 1e-4)).epsilon(1e-6));
}

TEST_CASE("particle volume sigmoid symmetry") {
  // V(d, o) + V(-d, -o) = Vg (1 + 2 eps) for all d, o.
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> unif(-0.02, 0.02);
  const double Vg = 8e-9, beta = 5e3, eps = 1e-4;
  for (int i = 0; i < 500; ++i) {
    const double d = unif(rng);
    const double o = unif(rng);
    const double sum = particle_volume(d, o, Vg, beta, eps) +
                       particle_volume(-d, -o, Vg, beta, eps);
    CHECK(sum == doctest::Approx(Vg * (1.0 + 2.0 * eps)).epsilon(1e-12));
  }
}

TEST_CASE("particle volume monotone decreasing in d + o") {
  const double Vg = 8e-9;
  double prev = particle_volume(-0.05, 0.0, Vg, 5e3, 1e-4);
  for (double d = -0.049; d < 0.05; d += 1e-3) {
    const double v = particle_volume(d, 0.0, Vg, 5e3, 1e-4);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("particle set validation catches broken invariants") {
  SimConfig config;
  std::vector<MaterialSegment> segments(1);
  ParticleSet ps;
  ps.x.push_back(Vec3(0.1, 0.1, 0.1));
  ps.v.push_back(Vec3::Zero());
  ps.F.push_back(Mat3::Identity());
  ps.C.push_back(Mat3::Zero());
  ps.segment.push_back(0);
  ps.d.push_back(-0.01);
  ps.rest_volume.push_back(8e-9);
  ps.effective_volume.push_back(8e-9);
  ps.mass.push_back(1e-5);
  ps.bc_flag.push_back(0);
  CHECK_NOTHROW(ps.validate(segments, config));

  SUBCASE("missing segment reference") {
    ps.segment[0] = 3;
    CHECK_THROWS_AS(ps.validate(segments, config), DataError);
  }
  SUBCASE("inverted deformation gradient") {
    ps.F[0](0, 0) = -1.0;
    CHECK_THROWS_AS(ps.validate(segments, config), DataError);
  }
  SUBCASE("effective volume above the ceiling") {
    ps.effective_volume[0] = 8e-9 * (1.0 + 2e-4);
    CHECK_THROWS_AS(ps.validate(segments, config), DataError);
  }
  SUBCASE("array length mismatch") {
    ps.mass.push_back(1.0);
    CHECK_THROWS_AS(ps.validate(segments, config), DataError);
  }
}

TEST_CASE("material segment validation") {
  MaterialSegment seg;
  CHECK_NOTHROW(seg.validate());
  seg.nu = 0.5;
  CHECK_THROWS_AS(seg.validate(), InvalidParameterError);
  seg.nu = 0.0;
  CHECK_THROWS_AS(seg.validate(), InvalidParameterError);
}
