#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "imbseg/metrics.hpp"
#include "imbseg/rng.hpp"

using namespace imbseg;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

LabelMask mask_from(Index3 dims, const std::vector<std::size_t>& fg, Spacing3 spacing = {1.0, 1.0, 1.0}) {
  LabelMask m(dims, spacing, std::vector<std::uint8_t>(voxel_count(dims), 0));
  for (auto i : fg) m.data[i] = 1;
  return m;
}

LabelMask random_mask(Rng& rng, Index3 dims, Spacing3 spacing, double density) {
  LabelMask m(dims, spacing, std::vector<std::uint8_t>(voxel_count(dims), 0));
  for (auto& v : m.data) v = rng.uniform() < density ? 1 : 0;
  return m;
}

// Brute-force HD95: all-pairs distances between surface voxels, same surface
// definition (6-neighborhood, border = background) and the same nearest-rank
// percentile. Arithmetic mirrors the separable transform term for term so the
// comparison can demand exact equality.
double hd95_bruteforce(const LabelMask& pred, const LabelMask& ref) {
  const auto surf_of = [](const LabelMask& m) {
    std::vector<std::array<int, 3>> s;
    const int nx = m.dims[0], ny = m.dims[1], nz = m.dims[2];
    auto bg = [&](int x, int y, int z) {
      if (x < 0 || x >= nx || y < 0 || y >= ny || z < 0 || z >= nz) return true;
      return m.at(x, y, z) == 0;
    };
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x)
          if (m.at(x, y, z) && (bg(x - 1, y, z) || bg(x + 1, y, z) || bg(x, y - 1, z) || bg(x, y + 1, z) ||
                                bg(x, y, z - 1) || bg(x, y, z + 1)))
            s.push_back({x, y, z});
    return s;
  };
  const auto a = surf_of(pred);
  const auto b = surf_of(ref);
  const Spacing3 sp = pred.spacing;

  const auto directed = [&](const std::vector<std::array<int, 3>>& from, const std::vector<std::array<int, 3>>& to) {
    std::vector<double> dist;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double tx = static_cast<double>(p[0] - q[0]) * sp[0];
        const double ty = static_cast<double>(p[1] - q[1]) * sp[1];
        const double tz = static_cast<double>(p[2] - q[2]) * sp[2];
        best = std::min(best, tx * tx + ty * ty + tz * tz);
      }
      dist.push_back(std::sqrt(best));
    }
    std::sort(dist.begin(), dist.end());
    const std::size_t rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(dist.size())));
    return dist[std::max<std::size_t>(rank, 1) - 1];
  };
  return std::max(directed(a, b), directed(b, a));
}

LabelMask permute_axes(const LabelMask& m, const std::array<int, 3>& perm) {
  const Index3 nd = {m.dims[perm[0]], m.dims[perm[1]], m.dims[perm[2]]};
  const Spacing3 ns = {m.spacing[perm[0]], m.spacing[perm[1]], m.spacing[perm[2]]};
  LabelMask out(nd, ns, std::vector<std::uint8_t>(m.data.size(), 0));
  std::array<int, 3> c{};
  for (c[2] = 0; c[2] < m.dims[2]; ++c[2])
    for (c[1] = 0; c[1] < m.dims[1]; ++c[1])
      for (c[0] = 0; c[0] < m.dims[0]; ++c[0])
        out.data[voxel_index(nd, c[perm[0]], c[perm[1]], c[perm[2]])] = m.at(c[0], c[1], c[2]);
  return out;
}

}  // namespace

TEST_CASE("dsc hand cases", "[metrics]") {
  const Index3 d = {4, 4, 4};
  const auto a = mask_from(d, {1, 2});
  SECTION("identical nonempty masks") { CHECK(dsc(a, a) == 1.0); }
  SECTION("two-voxel masks with one shared voxel") {
    const auto b = mask_from(d, {2, 3});
    CHECK(dsc(a, b) == 0.5);
    CHECK(dsc(b, a) == 0.5);
  }
  SECTION("disjoint masks") {
    const auto b = mask_from(d, {40, 41});
    CHECK(dsc(a, b) == 0.0);
  }
  SECTION("both empty scores perfect") {
    const auto e = mask_from(d, {});
    CHECK(dsc(e, e) == 1.0);
  }
  SECTION("one empty scores zero") {
    const auto e = mask_from(d, {});
    CHECK(dsc(a, e) == 0.0);
  }
  SECTION("geometry mismatch") {
    const auto other = mask_from({4, 4, 2}, {});
    CHECK_THROWS_AS(dsc(a, other), config_error);
  }
}

TEST_CASE("volumetric similarity hand cases", "[metrics]") {
  const Index3 d = {8, 8, 8};
  SECTION("equal volumes anywhere give 1") {
    const auto a = mask_from(d, {0, 1, 2});
    const auto b = mask_from(d, {100, 200, 300});
    CHECK(volumetric_similarity(a, b) == 1.0);
  }
  SECTION("100 vs 50 voxels") {
    std::vector<std::size_t> fa(100), fb(50);
    for (int i = 0; i < 100; ++i) fa[i] = i;
    for (int i = 0; i < 50; ++i) fb[i] = 300 + i;
    CHECK_THAT(volumetric_similarity(mask_from(d, fa), mask_from(d, fb)), WithinRel(2.0 / 3.0, 1e-15));
  }
  SECTION("one empty gives 0, both empty give 1") {
    const auto a = mask_from(d, {5});
    const auto e = mask_from(d, {});
    CHECK(volumetric_similarity(a, e) == 0.0);
    CHECK(volumetric_similarity(e, a) == 0.0);
    CHECK(volumetric_similarity(e, e) == 1.0);
  }
}

TEST_CASE("hd95 hand cases", "[metrics]") {
  const Index3 d = {8, 8, 8};
  SECTION("identical masks give 0") {
    const auto a = mask_from(d, {voxel_index(d, 2, 3, 4), voxel_index(d, 3, 3, 4)});
    const auto r = hd95(a, a);
    CHECK(r.defined);
    CHECK(r.value == 0.0);
  }
  SECTION("single voxels three steps apart, unit spacing") {
    const auto a = mask_from(d, {voxel_index(d, 1, 2, 2)});
    const auto b = mask_from(d, {voxel_index(d, 4, 2, 2)});
    const auto r = hd95(a, b);
    CHECK(r.defined);
    CHECK_THAT(r.value, WithinRel(3.0, 1e-15));
    CHECK(hd95(b, a).value == r.value);  // symmetric
  }
  SECTION("the same voxels with 0.5 mm spacing scale to 1.5 mm") {
    const Spacing3 sp = {0.5, 1.0, 1.0};
    const auto a = mask_from(d, {voxel_index(d, 1, 2, 2)}, sp);
    const auto b = mask_from(d, {voxel_index(d, 4, 2, 2)}, sp);
    CHECK_THAT(hd95(a, b).value, WithinRel(1.5, 1e-15));
  }
  SECTION("both empty is defined as 0, one empty is undefined") {
    const auto e = mask_from(d, {});
    const auto a = mask_from(d, {9});
    CHECK(hd95(e, e).defined);
    CHECK(hd95(e, e).value == 0.0);
    CHECK(!hd95(a, e).defined);
    CHECK(!hd95(e, a).defined);
  }
}

TEST_CASE("hd95 uses interior-excluding surfaces", "[metrics]") {
  // A solid 3x3x3 cube vs the same cube dilated by one voxel along +x only:
  // the cube's interior voxel is not part of the surface, so every distance
  // is driven by the shells.
  const Index3 d = {9, 9, 9};
  std::vector<std::size_t> cube, slab;
  for (int z = 3; z <= 5; ++z)
    for (int y = 3; y <= 5; ++y)
      for (int x = 3; x <= 5; ++x) cube.push_back(voxel_index(d, x, y, z));
  slab = cube;
  for (int z = 3; z <= 5; ++z)
    for (int y = 3; y <= 5; ++y) slab.push_back(voxel_index(d, 6, y, z));
  const auto a = mask_from(d, cube);
  const auto b = mask_from(d, slab);
  const auto r = hd95(a, b);
  CHECK(r.defined);
  // Directed distances are at most one voxel step.
  CHECK(r.value <= 1.0 + 1e-12);
  CHECK(r.value > 0.0);
}

TEST_CASE("hd95 equals the brute-force oracle on random masks", "[metrics]") {
  Rng rng(987);
  const std::array<double, 4> spacings = {0.5, 1.0, 1.5, 2.5};
  int nontrivial = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index3 d = {6, 6, 6};
    const Spacing3 sp = {spacings[rng.uniform_int(0, 3)], spacings[rng.uniform_int(0, 3)],
                         spacings[rng.uniform_int(0, 3)]};
    const auto a = random_mask(rng, d, sp, 0.05 + 0.4 * rng.uniform());
    const auto b = random_mask(rng, d, sp, 0.05 + 0.4 * rng.uniform());
    const auto r = hd95(a, b);
    if (!r.defined) {
      CHECK((a.foreground_count() == 0) != (b.foreground_count() == 0));
      continue;
    }
    if (a.foreground_count() == 0 && b.foreground_count() == 0) {
      CHECK(r.value == 0.0);
      continue;
    }
    ++nontrivial;
    CHECK(r.value == hd95_bruteforce(a, b));  // exact, not approximate
  }
  CHECK(nontrivial > 80);
}

TEST_CASE("metrics are invariant under axis permutation", "[metrics]") {
  Rng rng(555);
  const Index3 d = {5, 6, 7};
  const Spacing3 sp = {0.5, 1.0, 2.0};
  const auto a = random_mask(rng, d, sp, 0.2);
  const auto b = random_mask(rng, d, sp, 0.2);
  const std::array<std::array<int, 3>, 3> perms = {{{1, 0, 2}, {2, 1, 0}, {1, 2, 0}}};
  for (const auto& perm : perms) {
    const auto pa = permute_axes(a, perm);
    const auto pb = permute_axes(b, perm);
    CHECK(dsc(pa, pb) == dsc(a, b));
    CHECK(volumetric_similarity(pa, pb) == volumetric_similarity(a, b));
    const auto h0 = hd95(a, b);
    const auto h1 = hd95(pa, pb);
    CHECK(h1.defined == h0.defined);
    if (h0.defined) CHECK_THAT(h1.value, WithinAbs(h0.value, 1e-12));
  }
}

TEST_CASE("perfect overlap forces perfect volume agreement", "[metrics]") {
  Rng rng(31);
  const auto a = random_mask(rng, {6, 6, 6}, {1, 1, 1}, 0.3);
  REQUIRE(dsc(a, a) == 1.0);
  CHECK(volumetric_similarity(a, a) == 1.0);
}

TEST_CASE("evaluate_case fills all report fields", "[metrics]") {
  const Index3 d = {8, 8, 8};
  // Two separate blobs in ref, one matching blob in pred.
  std::vector<std::size_t> ref_fg, pred_fg;
  for (int x = 1; x <= 2; ++x)
    for (int y = 1; y <= 2; ++y) ref_fg.push_back(voxel_index(d, x, y, 1));
  ref_fg.push_back(voxel_index(d, 6, 6, 6));
  for (int x = 1; x <= 2; ++x)
    for (int y = 1; y <= 2; ++y) pred_fg.push_back(voxel_index(d, x, y, 1));
  const auto ref = mask_from(d, ref_fg);
  const auto pred = mask_from(d, pred_fg);

  const CaseMetrics m = evaluate_case(pred, ref);
  CHECK_THAT(m.dsc, WithinRel(2.0 * 4.0 / (4.0 + 5.0), 1e-15));
  CHECK(m.hd95_defined);
  CHECK(m.pred_components == 1);
  CHECK(m.ref_components == 2);
  CHECK(!m.empty_pred);
  CHECK(!m.empty_ref);

  const auto e = mask_from(d, {});
  const CaseMetrics me = evaluate_case(e, e);
  CHECK(me.dsc == 1.0);
  CHECK(me.volumetric_similarity == 1.0);
  CHECK(me.hd95 == 0.0);
  CHECK(me.hd95_defined);
  CHECK(me.empty_pred);
  CHECK(me.empty_ref);
}

TEST_CASE("aggregation averages and excludes undefined hd95", "[metrics]") {
  CaseMetrics a;
  a.dsc = 0.4;
  a.volumetric_similarity = 0.9;
  a.hd95 = 3.0;
  a.hd95_defined = true;
  CaseMetrics b;
  b.dsc = 0.6;
  b.volumetric_similarity = 0.7;
  b.hd95 = 0.0;
  b.hd95_defined = false;

  SECTION("single case equals itself") {
    const auto s = aggregate({a});
    CHECK(s.n_cases == 1);
    CHECK(s.mean_dsc == 0.4);
    CHECK(s.mean_vs == 0.9);
    CHECK(s.mean_hd95_defined == 3.0);
    CHECK(s.hd95_defined_count == 1);
    CHECK(s.hd95_undefined_count == 0);
  }
  SECTION("mean over two cases with one undefined hd95") {
    const auto s = aggregate({a, b});
    CHECK(s.n_cases == 2);
    CHECK_THAT(s.mean_dsc, WithinRel(0.5, 1e-15));
    CHECK_THAT(s.mean_vs, WithinRel(0.8, 1e-15));
    CHECK(s.mean_hd95_defined == 3.0);  // the undefined case is excluded
    CHECK(s.hd95_defined_count == 1);
    CHECK(s.hd95_undefined_count == 1);
  }
  SECTION("empty list is rejected") { CHECK_THROWS_AS(aggregate({}), config_error); }
}
