#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mtl/data.hpp"
#include "mtl/rng.hpp"

namespace fs = std::filesystem;
using namespace mtl;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mtl_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

FeatureBag random_bag(const std::string& id, int n, int dim, Rng& rng) {
  FeatureBag bag;
  bag.patient = id;
  bag.n = n;
  bag.dim = dim;
  for (int i = 0; i < n * dim; ++i)
    bag.features.push_back(static_cast<double>(static_cast<float>(rng.normal())));
  return bag;
}

std::vector<unsigned char> slurp_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("MTLF round trip is bit exact") {
  const fs::path dir = temp_dir("roundtrip");
  Rng rng(1);
  FeatureBag bag = random_bag("P1", 3, 4, rng);
  const fs::path file = dir / "P1.mtlf";
  write_features(bag, file.string());
  CHECK(fs::file_size(file) == 16 + 4 * 3 * 4);
  FeatureBag back = read_features(file.string());
  CHECK(back.n == 3);
  CHECK(back.dim == 4);
  CHECK(back.features == bag.features);
}

TEST_CASE("MTLF malformed inputs are diagnosed") {
  const fs::path dir = temp_dir("malformed");
  Rng rng(2);
  FeatureBag bag = random_bag("P1", 2, 3, rng);
  const fs::path file = dir / "good.mtlf";
  write_features(bag, file.string());
  const auto good = slurp_bytes(file);

  SUBCASE("bad magic") {
    auto bytes = good;
    bytes[0] = 'X';
    CHECK_THROWS_WITH_AS(parse_features(bytes, "t"),
                         doctest::Contains("bad magic"), FormatError);
  }
  SUBCASE("bad version") {
    auto bytes = good;
    bytes[4] = 9;
    CHECK_THROWS_WITH_AS(parse_features(bytes, "t"),
                         doctest::Contains("version"), FormatError);
  }
  SUBCASE("header-only zero patches") {
    auto bytes = good;
    bytes[8] = bytes[9] = bytes[10] = bytes[11] = 0;
    bytes.resize(16);
    CHECK_THROWS_WITH_AS(parse_features(bytes, "t"),
                         doctest::Contains("at least one patch"), FormatError);
  }
  SUBCASE("truncation") {
    auto bytes = good;
    bytes.resize(bytes.size() - 5);
    CHECK_THROWS_WITH_AS(parse_features(bytes, "t"),
                         doctest::Contains("length"), FormatError);
  }
  SUBCASE("trailing bytes") {
    auto bytes = good;
    bytes.push_back(0);
    CHECK_THROWS_AS(parse_features(bytes, "t"), FormatError);
  }
  SUBCASE("mismatched n") {
    auto bytes = good;
    bytes[8] = 7;  // claims 7 patches, payload has 2
    CHECK_THROWS_AS(parse_features(bytes, "t"), FormatError);
  }
}

TEST_CASE("MTLF fuzz never crashes") {
  Rng rng(3);
  FeatureBag bag = random_bag("P1", 4, 5, rng);
  const fs::path dir = temp_dir("fuzz");
  const fs::path file = dir / "ref.mtlf";
  write_features(bag, file.string());
  const auto good = slurp_bytes(file);
  int failures = 0;
  for (int trial = 0; trial < 500; ++trial) {
    auto bytes = good;
    const int mode = static_cast<int>(rng.below(3));
    if (mode == 0 && !bytes.empty()) {
      bytes.resize(rng.below(bytes.size()));
    } else if (mode == 1) {
      const std::size_t idx = rng.below(bytes.size());
      bytes[idx] = static_cast<unsigned char>(rng.below(256));
    } else {
      bytes.assign(rng.below(64), 0);
      for (auto& b : bytes) b = static_cast<unsigned char>(rng.below(256));
    }
    try {
      FeatureBag parsed = parse_features(bytes, "fuzz");
      CHECK(parsed.n >= 1);  // parse may legitimately succeed
    } catch (const FormatError&) {
      ++failures;  // diagnosed, not crashed
    }
  }
  CHECK(failures > 0);
}

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

fs::path make_small_cohort(const std::string& name, const std::string& clinical) {
  const fs::path dir = temp_dir(name);
  Rng rng(4);
  std::string slides;
  for (int i = 0; i < 5; ++i) {
    const std::string id = "P" + std::to_string(i);
    FeatureBag bag = random_bag(id, 2 + i, 3, rng);
    write_features(bag, (dir / (id + ".mtlf")).string());
    if (!slides.empty()) slides += ",";
    slides += "{\"patient\":\"" + id + "\",\"file\":\"" + id +
              ".mtlf\",\"n\":" + std::to_string(2 + i) + "}";
  }
  write_text_file(dir / "manifest.json",
                  "{\"version\":1,\"dim\":3,\"slides\":[" + slides + "]}");
  write_text_file(dir / "clinical.csv", clinical);
  return dir;
}

}  // namespace

TEST_CASE("load_cohort joins and reports exclusions") {
  const fs::path dir = make_small_cohort(
      "join",
      "PATIENT,y,tme\nP0,1,0.5\nP1,0,-0.25\nP2,1,\nP3,0,2.5\nP4,,1.0\n");

  SUBCASE("main label only") {
    Cohort c = load_cohort((dir / "manifest.json").string(),
                           (dir / "clinical.csv").string(), "y", {});
    CHECK(c.patients.size() == 4);  // P4 lacks y
    CHECK(c.exclusions.size() == 1);
    CHECK(c.exclusions[0].patient == "P4");
  }
  SUBCASE("aux blanks excluded only when aux requested") {
    Cohort c = load_cohort((dir / "manifest.json").string(),
                           (dir / "clinical.csv").string(), "y", {"tme"});
    CHECK(c.patients.size() == 3);  // P2 lacks tme, P4 lacks y
    CHECK(c.exclusions.size() == 2);
    CHECK(c.patients[0].aux == std::vector<double>{0.5});
  }
  SUBCASE("unknown column is a config error") {
    CHECK_THROWS_AS(load_cohort((dir / "manifest.json").string(),
                                (dir / "clinical.csv").string(), "nope", {}),
                    ConfigError);
    CHECK_THROWS_AS(load_cohort((dir / "manifest.json").string(),
                                (dir / "clinical.csv").string(), "y", {"nope"}),
                    ConfigError);
  }
}

TEST_CASE("load_cohort rejects duplicates and empty joins") {
  SUBCASE("duplicate clinical row") {
    const fs::path dir = make_small_cohort("dup", "PATIENT,y\nP0,1\nP0,0\n");
    CHECK_THROWS_AS(load_cohort((dir / "manifest.json").string(),
                                (dir / "clinical.csv").string(), "y", {}),
                    CohortError);
  }
  SUBCASE("empty intersection") {
    const fs::path dir = make_small_cohort("empty", "PATIENT,y\nQ0,1\nQ1,0\n");
    CHECK_THROWS_AS(load_cohort((dir / "manifest.json").string(),
                                (dir / "clinical.csv").string(), "y", {}),
                    CohortError);
  }
}

TEST_CASE("load_cohort is order independent") {
  const std::string clinical = "PATIENT,y\nP0,1\nP1,0\nP2,1\nP3,0\nP4,1\n";
  const fs::path dir = make_small_cohort("order", clinical);

  Cohort a = load_cohort((dir / "manifest.json").string(),
                         (dir / "clinical.csv").string(), "y", {});

  // permute the manifest slides
  std::ifstream in(dir / "manifest.json");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  // reverse the slide order by rebuilding
  std::string slides;
  for (int i = 4; i >= 0; --i) {
    const std::string id = "P" + std::to_string(i);
    if (!slides.empty()) slides += ",";
    slides += "{\"patient\":\"" + id + "\",\"file\":\"" + id +
              ".mtlf\",\"n\":" + std::to_string(2 + i) + "}";
  }
  write_text_file(dir / "manifest.json",
                  "{\"version\":1,\"dim\":3,\"slides\":[" + slides + "]}");
  Cohort b = load_cohort((dir / "manifest.json").string(),
                         (dir / "clinical.csv").string(), "y", {});

  CHECK(a.patients.size() == b.patients.size());
  for (const auto& pa : a.patients) {
    bool found = false;
    for (const auto& pb : b.patients)
      if (pb.id == pa.id) {
        found = true;
        CHECK(pb.label == pa.label);
        CHECK(pb.bag.features == pa.bag.features);
      }
    CHECK(found);
  }
}

TEST_CASE("manifest n mismatch is diagnosed") {
  const fs::path dir = make_small_cohort("nmismatch", "PATIENT,y\nP0,1\nP1,0\n");
  // rewrite manifest claiming wrong n for P0
  write_text_file(dir / "manifest.json",
                  "{\"version\":1,\"dim\":3,\"slides\":[{\"patient\":\"P0\","
                  "\"file\":\"P0.mtlf\",\"n\":99}]}");
  CHECK_THROWS_WITH_AS(load_cohort((dir / "manifest.json").string(),
                                   (dir / "clinical.csv").string(), "y", {}),
                       doctest::Contains("99"), FormatError);
}

TEST_CASE("synth cohort determinism and structure") {
  SynthSpec spec;
  spec.patients = 30;
  spec.dim = 8;
  spec.bag_min = 2;
  spec.bag_max = 6;
  spec.seed = 42;

  Cohort a = synth_cohort(spec);
  Cohort b = synth_cohort(spec);
  CHECK(a.patients.size() == 30);
  for (std::size_t i = 0; i < a.patients.size(); ++i) {
    CHECK(a.patients[i].id == b.patients[i].id);
    CHECK(a.patients[i].label == b.patients[i].label);
    CHECK(a.patients[i].aux == b.patients[i].aux);
    CHECK(a.patients[i].bag.features == b.patients[i].bag.features);
    CHECK(a.patients[i].bag.n >= 2);
    CHECK(a.patients[i].bag.n <= 6);
  }

  spec.seed = 43;
  Cohort c = synth_cohort(spec);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.patients.size(); ++i)
    any_diff = any_diff || a.patients[i].bag.features != c.patients[i].bag.features;
  CHECK(any_diff);
}

TEST_CASE("synth aux correlation follows rho") {
  SynthSpec spec;
  spec.patients = 500;
  spec.dim = 4;
  spec.bag_min = 1;
  spec.bag_max = 2;
  spec.seed = 7;

  SUBCASE("rho zero gives near-zero correlation with the label driver") {
    spec.aux_correlation = 0.0;
    Cohort c = synth_cohort(spec);
    // correlate aux with the label (a monotone function of f)
    double mean_a = 0.0, mean_y = 0.0;
    for (const auto& p : c.patients) {
      mean_a += p.aux[0];
      mean_y += p.label;
    }
    mean_a /= 500;
    mean_y /= 500;
    double cov = 0.0, va = 0.0, vy = 0.0;
    for (const auto& p : c.patients) {
      cov += (p.aux[0] - mean_a) * (p.label - mean_y);
      va += (p.aux[0] - mean_a) * (p.aux[0] - mean_a);
      vy += (p.label - mean_y) * (p.label - mean_y);
    }
    CHECK(std::abs(cov / std::sqrt(va * vy)) < 0.1);
  }
  SUBCASE("rho one with no flip noise makes aux a monotone label driver") {
    spec.aux_correlation = 1.0;
    spec.flip_noise = 0.0;
    Cohort c = synth_cohort(spec);
    // y = 1 exactly when standardized f exceeds the standardized threshold
    const double thresh =
        (spec.label_threshold - 0.5) / std::sqrt(1.0 / 12.0);
    for (const auto& p : c.patients)
      CHECK(p.label == (p.aux[0] > thresh ? 1 : 0));
  }
}

TEST_CASE("synth label prevalence tracks threshold and noise") {
  SynthSpec spec;
  spec.patients = 2000;
  spec.dim = 2;
  spec.bag_min = 1;
  spec.bag_max = 1;
  spec.label_threshold = 0.7;
  spec.flip_noise = 0.1;
  spec.seed = 11;
  Cohort c = synth_cohort(spec);
  double rate = 0.0;
  for (const auto& p : c.patients) rate += p.label;
  rate /= spec.patients;
  // P(y=1) = 0.3 * 0.9 + 0.7 * 0.1 = 0.34; 3 sigma of binomial(2000, .34)
  const double expect = 0.34;
  const double sigma = std::sqrt(expect * (1 - expect) / spec.patients);
  CHECK(std::abs(rate - expect) < 3 * sigma);
}

TEST_CASE("write_cohort then load_cohort round trips") {
  SynthSpec spec;
  spec.patients = 12;
  spec.dim = 5;
  spec.bag_min = 2;
  spec.bag_max = 4;
  spec.seed = 13;
  Cohort made = synth_cohort(spec);
  const fs::path dir = temp_dir("synthio");
  write_cohort(made, dir.string());

  Cohort loaded = load_cohort((dir / "manifest.json").string(),
                              (dir / "clinical.csv").string(), "y", {"aux"});
  REQUIRE(loaded.patients.size() == made.patients.size());
  for (std::size_t i = 0; i < made.patients.size(); ++i) {
    CHECK(loaded.patients[i].id == made.patients[i].id);
    CHECK(loaded.patients[i].label == made.patients[i].label);
    CHECK(loaded.patients[i].aux[0] ==
          doctest::Approx(made.patients[i].aux[0]).epsilon(0));
    CHECK(loaded.patients[i].bag.features == made.patients[i].bag.features);
  }
}
