// Procedural factor dataset: generation, rendering, pairing, archive format.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <set>

#include "disdiff/data.hpp"

using namespace disdiff;

namespace {
struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};
}  // namespace

TEST_CASE("exhaustive generation: counts, label coverage, determinism") {
  std::vector<FactorSpec> spec{{"hue", 4, FactorRole::ObjectHue},
                               {"x", 4, FactorRole::XPos},
                               {"y", 4, FactorRole::YPos}};
  auto ds = generate_dataset(spec, 32, 7);
  CHECK(ds.count() == 64);
  CHECK(ds.labels.size() == 64 * 3);
  CHECK(ds.images.size() == 64u * 3 * 32 * 32);
  // no duplicate label rows, every row within cardinality
  std::set<std::vector<int>> rows;
  for (std::int64_t i = 0; i < ds.count(); ++i) {
    std::vector<int> r(3);
    for (int k = 0; k < 3; ++k) {
      r[k] = ds.label(i, k);
      CHECK(r[k] >= 0);
      CHECK(r[k] < spec[k].cardinality);
    }
    CHECK(ds.index_of(r) == i);
    rows.insert(r);
  }
  CHECK(rows.size() == 64);

  auto ds2 = generate_dataset(spec, 32, 7);
  CHECK(ds.images == ds2.images);
  CHECK(ds.labels == ds2.labels);
}

TEST_CASE("generation rejects bad specs") {
  CHECK_THROWS_AS(generate_dataset({}, 32, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset({{"a", 1, FactorRole::ObjectHue}}, 32, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset({{"a", 2, FactorRole::ObjectHue},
                                    {"a", 2, FactorRole::XPos}},
                                   32, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset({{"a", 2, FactorRole::XPos},
                                    {"b", 2, FactorRole::XPos}},
                                   32, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset({{"a", 20, FactorRole::ObjectHue},
                                    {"b", 20, FactorRole::XPos},
                                    {"c", 20, FactorRole::YPos}},
                                   32, 0, /*cap=*/1000),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      generate_dataset({{"a", 2, FactorRole::ObjectHue}}, 17, 0),
      std::invalid_argument);
  CHECK_THROWS_AS(factor_role_from_string("sparkles"), std::invalid_argument);
}

TEST_CASE("hue factor only touches the object mask") {
  auto ds = generate_dataset({{"hue", 2, FactorRole::ObjectHue}}, 16, 0);
  REQUIRE(ds.count() == 2);
  auto a = ds.image<double>(0);
  auto b = ds.image<double>(1);
  // background pixels (corner region far from the centered object) identical
  int hw = 16;
  auto px = [&](const Tensor<double>& t, int c, int y, int x) {
    return t[(c * hw + y) * hw + x];
  };
  for (int c = 0; c < 3; ++c) {
    CHECK(px(a, c, 0, 0) == px(b, c, 0, 0));
    CHECK(px(a, c, 0, 15) == px(b, c, 0, 15));
    CHECK(px(a, c, 15, 15) == px(b, c, 15, 15));
  }
  // but the images do differ on the object
  double diff = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) diff += std::abs(a[i] - b[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("changing exactly one factor always changes the image") {
  auto spec = default_factor_spec();
  auto ds = generate_dataset(spec, 32, 1);
  for (int k = 0; k < ds.n_factors(); ++k) {
    std::vector<int> base(ds.n_factors(), 0);
    std::vector<int> alt = base;
    alt[k] = 1;
    auto a = ds.image<double>(ds.index_of(base));
    auto b = ds.image<double>(ds.index_of(alt));
    double l2 = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
      l2 += (a[i] - b[i]) * (a[i] - b[i]);
    INFO("factor " << spec[k].name);
    CHECK(l2 > 0.0);
  }
}

TEST_CASE("all roles render, are anti-aliased and stay in range") {
  std::vector<FactorSpec> spec{{"hue", 3, FactorRole::ObjectHue},
                               {"bg", 2, FactorRole::BackgroundHue},
                               {"x", 2, FactorRole::XPos},
                               {"y", 2, FactorRole::YPos},
                               {"s", 2, FactorRole::Scale},
                               {"shape", 4, FactorRole::Shape}};
  auto ds = generate_dataset(spec, 32, 3);
  CHECK(ds.count() == 3 * 2 * 2 * 2 * 2 * 4);
  auto x = ds.batch<double>({0, 17, ds.count() - 1});
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    CHECK(x[i] >= 0.0);
    CHECK(x[i] <= 1.0);
  }
  // anti-aliasing: edge pixels take intermediate values, so each image uses
  // more than two distinct intensities in its red channel
  for (std::int64_t i : {std::int64_t{0}, ds.count() / 2}) {
    std::set<std::uint8_t> levels;
    const std::uint8_t* p = ds.images.data() + i * ds.pixels();
    for (int j = 0; j < 32 * 32; ++j) levels.insert(p[j]);
    CHECK(levels.size() > 2);
  }
}

TEST_CASE("fixed-factor pairs share the factor; others are uniform") {
  auto ds = generate_dataset(default_factor_spec(), 32, 5);
  Rng rng(99);
  // fixed column always agrees
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 50; ++i) {
      auto pr = sample_pair_fixed_factor(ds, k, rng);
      CHECK(pr.factor == k);
      CHECK(ds.label(pr.a, k) == ds.label(pr.b, k));
    }
  // free columns: (a) near-uniform marginals, (b) a,b independent
  int n = 10000;
  std::vector<int> counts(4, 0);
  int agree = 0;
  for (int i = 0; i < n; ++i) {
    auto pr = sample_pair_fixed_factor(ds, 2, rng);  // fix scale
    counts[ds.label(pr.a, 1)]++;                     // x-pos of first image
    if (ds.label(pr.a, 0) == ds.label(pr.b, 0)) agree++;  // hue agreement
  }
  for (int c : counts)
    CHECK(std::abs(c / double(n) - 0.25) < 0.02);  // ~5 sigma of binomial
  CHECK(std::abs(agree / double(n) - 0.25) < 0.02);

  CHECK_THROWS_AS(sample_pair_fixed_factor(ds, 3, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_pair_fixed_factor(ds, -1, rng), std::invalid_argument);
}

TEST_CASE("nearest-label lookup classifies clean and noisy images") {
  auto ds = generate_dataset(default_factor_spec(), 32, 2);
  Rng rng(4);
  for (std::int64_t i : {std::int64_t{0}, std::int64_t{20}, ds.count() - 1}) {
    auto img = ds.image<double>(i);
    // mild pixel noise must not change the nearest neighbor
    for (std::int64_t j = 0; j < img.numel(); ++j)
      img[j] = std::clamp(img[j] + 0.02 * rng.normal(), 0.0, 1.0);
    auto row = ds.nearest_labels(img);
    for (int k = 0; k < ds.n_factors(); ++k) CHECK(row[k] == ds.label(i, k));
  }
}

TEST_CASE("archive round trip is bit exact") {
  auto ds = generate_dataset(default_factor_spec(), 32, 11);
  TempFile f("disdiff_ds_roundtrip.bin");
  save_dataset(ds, f.path);
  auto back = load_dataset(f.path);
  CHECK(back.image_size == ds.image_size);
  CHECK(back.seed == ds.seed);
  REQUIRE(back.spec.size() == ds.spec.size());
  for (size_t k = 0; k < ds.spec.size(); ++k) {
    CHECK(back.spec[k].name == ds.spec[k].name);
    CHECK(back.spec[k].cardinality == ds.spec[k].cardinality);
    CHECK(back.spec[k].role == ds.spec[k].role);
  }
  CHECK(back.images == ds.images);
  CHECK(back.labels == ds.labels);
}

TEST_CASE("archive rejects truncation, garbage and future versions") {
  auto ds = generate_dataset({{"hue", 2, FactorRole::ObjectHue}}, 16, 0);
  TempFile f("disdiff_ds_bad.bin");
  save_dataset(ds, f.path);

  // truncate to half
  {
    std::ifstream is(f.path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
    std::ofstream os(f.path, std::ios::binary | std::ios::trunc);
    os.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
  }
  CHECK_THROWS_WITH_AS(load_dataset(f.path),
                       doctest::Contains("unexpected end of file"),
                       std::runtime_error);

  // wrong magic
  {
    std::ofstream os(f.path, std::ios::binary | std::ios::trunc);
    os << "not a dataset at all";
  }
  CHECK_THROWS_WITH_AS(load_dataset(f.path),
                       doctest::Contains("not a dataset file"),
                       std::runtime_error);

  // future version number
  {
    std::ofstream os(f.path, std::ios::binary | std::ios::trunc);
    os.write("DDFD", 4);
    std::uint32_t v = kDatasetFormatVersion + 1;
    os.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_WITH_AS(load_dataset(f.path), doctest::Contains("version"),
                       std::runtime_error);

  CHECK_THROWS_AS(load_dataset("/tmp/definitely_missing_dataset.bin"),
                  std::runtime_error);
}

TEST_CASE("default spec matches the documented desk-scale dataset") {
  auto spec = default_factor_spec();
  auto ds = generate_dataset(spec, 32, 0);
  CHECK(ds.count() == 48);  // 4 hues x 4 positions x 3 scales
  CHECK(ds.n_factors() == 3);
  auto x = ds.batch<float>({0, 1, 2, 47});
  CHECK(x.shape == std::vector<int>({4, 3, 32, 32}));
  CHECK(x.all_finite());
}
