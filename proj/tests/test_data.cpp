#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "cec/data.hpp"
#include "cec/tensor.hpp"

using namespace cec;
namespace fs = std::filesystem;

namespace {
bool same_dataset(const std::vector<PatchRecord>& a,
                  const std::vector<PatchRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].patient_id != b[i].patient_id || a[i].label != b[i].label ||
        a[i].image.h != b[i].image.h || a[i].image.w != b[i].image.w ||
        a[i].image.pix != b[i].image.pix)
      return false;
  }
  return true;
}

PatchRecord ramp_record(int h, int w) {
  PatchRecord rec;
  rec.patient_id = "X";
  rec.image.h = h;
  rec.image.w = w;
  rec.image.pix.resize(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h * w; ++i)
    rec.image.pix[static_cast<std::size_t>(i)] =
        static_cast<float>(i) / static_cast<float>(h * w);
  return rec;
}
}  // namespace

TEST_CASE("synthetic generation is deterministic and validated") {
  ClassParams params;
  auto a = generate_synthetic(3, 5, params, 42);
  auto b = generate_synthetic(3, 5, params, 42);
  CHECK(a.size() == 15);
  CHECK(same_dataset(a, b));
  auto c = generate_synthetic(3, 5, params, 43);
  CHECK_FALSE(same_dataset(a, c));

  for (const auto& r : a) {
    CHECK(r.image.h >= 8);
    CHECK(r.image.h <= 24);
    CHECK(r.image.w >= 8);
    CHECK(r.image.w <= 24);
    for (float v : r.image.pix) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }

  ClassParams bad;
  bad.delta = 1.5;
  CHECK_THROWS_AS(generate_synthetic(2, 2, bad, 0), std::invalid_argument);
}

TEST_CASE("delta=1 classes are separable by the centroid oracle") {
  ClassParams params;
  params.delta = 1.0;
  auto records = generate_synthetic(4, 10, params, 7);
  CHECK(centroid_oracle_accuracy(records) >= 0.95);
}

TEST_CASE("delta=0 classes are indistinguishable") {
  ClassParams params;
  params.delta = 0.0;
  auto records = generate_synthetic(10, 20, params, 7);
  const double acc = centroid_oracle_accuracy(records);
  CHECK(acc > 0.3);
  CHECK(acc < 0.75);  // centroid fit on its own data; near chance
}

TEST_CASE("sampled patches are square with side in [8,16]") {
  Rng size_rng(1);
  Rng rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    auto rec = ramp_record(size_rng.uniform_int(8, 30),
                           size_rng.uniform_int(8, 30));
    auto s = sample_patch_traced(rec, rng);
    CHECK(s.patch.h == s.patch.w);
    CHECK(s.patch.h >= 8);
    CHECK(s.patch.h <= 16);
    if (rec.image.h > 16) {
      CHECK(s.stage1_h >= 8);
      CHECK(s.stage1_h <= 15);
    } else {
      CHECK(s.stage1_h == rec.image.h);
    }
    if (rec.image.w > 16) {
      CHECK(s.stage1_w >= 8);
      CHECK(s.stage1_w <= 15);
    } else {
      CHECK(s.stage1_w == rec.image.w);
    }
  }
}

TEST_CASE("a 10x10 ROI is returned untouched") {
  auto rec = ramp_record(10, 10);
  Rng rng(3);
  auto patch = sample_patch(rec, rng);
  CHECK(patch.h == 10);
  CHECK(patch.w == 10);
  CHECK(patch.pix == rec.image.pix);
}

TEST_CASE("a 12x9 ROI yields a 9x9 square from one of 4 column offsets") {
  auto rec = ramp_record(12, 9);
  Rng rng(4);
  std::set<int> offsets;
  for (int trial = 0; trial < 200; ++trial) {
    auto patch = sample_patch(rec, rng);
    REQUIRE(patch.h == 9);
    REQUIRE(patch.w == 9);
    // recover the vertical offset from the ramp values
    const float first = patch.pix[0];
    const int flat = static_cast<int>(std::lround(first * 12 * 9));
    const int dy = flat / 9;
    CHECK(flat % 9 == 0);  // full-width rows, so x offset is always 0
    CHECK(dy >= 0);
    CHECK(dy <= 3);
    offsets.insert(dy);
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 9; ++x)
        CHECK(patch.at(y, x) == rec.image.at(dy + y, x));
  }
  CHECK(offsets.size() == 4);  // all offsets occur across 200 draws
}

TEST_CASE("augmentation stays in the dihedral orbit of size <= 8") {
  auto rec = ramp_record(6, 6);
  Rng rng(5);
  std::set<std::vector<float>> orbit;
  std::multiset<float> original(rec.image.pix.begin(), rec.image.pix.end());
  for (int trial = 0; trial < 300; ++trial) {
    Image img = rec.image;
    augment_inplace(img, rng);
    CHECK(img.h == 6);
    CHECK(img.w == 6);
    std::multiset<float> pixels(img.pix.begin(), img.pix.end());
    CHECK(pixels == original);
    orbit.insert(img.pix);
  }
  CHECK(orbit.size() <= 8);
  CHECK(orbit.size() >= 2);

  Image rect = ramp_record(4, 6).image;
  CHECK_THROWS_AS(augment_inplace(rect, rng), std::invalid_argument);
}

TEST_CASE("bilinear resize: constants, bounds, and upsampler agreement") {
  Image c;
  c.h = c.w = 8;
  c.pix.assign(64, 0.3f);
  auto r = resize_to_input(c, 32);
  for (float v : r.pix) CHECK(v == doctest::Approx(0.3f));

  auto rec = ramp_record(16, 16);
  auto resized = resize_to_input(rec.image, 32);
  auto x = make_tensor<float>({1, 1, 16, 16}, std::vector<float>(
                                                  rec.image.pix.begin(),
                                                  rec.image.pix.end()));
  auto up = upsample_bilinear2(x);
  REQUIRE(resized.pix.size() == up->data.size());
  for (std::size_t i = 0; i < up->data.size(); ++i)
    CHECK(resized.pix[i] == up->data[i]);

  const auto [lo, hi] =
      std::minmax_element(rec.image.pix.begin(), rec.image.pix.end());
  auto r64 = resize_bilinear(rec.image, 64, 64);
  for (float v : r64.pix) {
    CHECK(v >= *lo - 1e-6f);
    CHECK(v <= *hi + 1e-6f);
  }

  Image rect = ramp_record(4, 6).image;
  CHECK_THROWS_AS(resize_to_input(rect, 32), std::invalid_argument);
}

TEST_CASE("patient splits use floor rounding and stay disjoint") {
  auto make_records = [](int patients) {
    std::vector<PatchRecord> records;
    for (int p = 0; p < patients; ++p) {
      auto rec = ramp_record(8, 8);
      rec.patient_id = "P" + std::to_string(p);
      records.push_back(rec);
      records.push_back(rec);
    }
    return records;
  };

  auto r28 = make_records(28);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = split_by_patient(r28, 0.7, seed);
    CHECK(m.train_ids.size() == 19);
    CHECK(m.test_ids.size() == 9);
    std::set<std::string> train(m.train_ids.begin(), m.train_ids.end());
    for (const auto& id : m.test_ids) CHECK(train.count(id) == 0);
    CHECK(train.size() + m.test_ids.size() == 28);
  }

  auto m10 = split_by_patient(make_records(10), 0.7, 1);
  CHECK(m10.train_ids.size() == 7);
  CHECK(m10.test_ids.size() == 3);

  CHECK_THROWS_AS(split_by_patient(make_records(1), 0.7, 0),
                  std::invalid_argument);
}

TEST_CASE("class weights follow inverse frequency with mean normalization") {
  std::vector<PatchRecord> records;
  auto push = [&](Label l, int n) {
    for (int i = 0; i < n; ++i) {
      auto rec = ramp_record(8, 8);
      rec.label = l;
      records.push_back(rec);
    }
  };
  push(Label::cancer, 10);
  push(Label::non_cancer, 10);
  auto balanced = compute_class_weights(records);
  CHECK(balanced[0] == doctest::Approx(1.0));
  CHECK(balanced[1] == doctest::Approx(1.0));

  records.clear();
  push(Label::cancer, 100);
  push(Label::non_cancer, 50);
  auto skewed = compute_class_weights(records);
  CHECK(skewed[1] == doctest::Approx(0.75));  // cancer
  CHECK(skewed[0] == doctest::Approx(1.5));   // non_cancer

  records.clear();
  push(Label::cancer, 5);
  CHECK_THROWS_AS(compute_class_weights(records), std::invalid_argument);
}

TEST_CASE("PGM and manifest round-trips") {
  const fs::path dir = fs::temp_directory_path() / "cec_data_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  ClassParams params;
  auto records = generate_synthetic(2, 3, params, 11);
  auto manifest = write_dataset(records, dir.string());
  auto loaded = read_dataset(manifest);
  REQUIRE(loaded.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].patient_id == records[i].patient_id);
    CHECK(loaded[i].label == records[i].label);
    REQUIRE(loaded[i].image.pix.size() == records[i].image.pix.size());
    for (std::size_t j = 0; j < records[i].image.pix.size(); ++j)
      CHECK(loaded[i].image.pix[j] ==
            doctest::Approx(records[i].image.pix[j]).epsilon(1e-4));
  }

  // 16-bit quantization is idempotent: a second round-trip is bit-exact
  const auto second = write_dataset(loaded, (dir / "again").string());
  auto reloaded = read_dataset(second);
  CHECK(same_dataset(loaded, reloaded));

  auto subset = select_by_patients(records, {"P001"});
  CHECK(subset.size() == 3);
  for (const auto& r : subset) CHECK(r.patient_id == "P001");

  fs::remove_all(dir);
}
