#include "mtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mtl/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtl {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'L', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::vector<unsigned char>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) |
         (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>());
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

}  // namespace

void write_features(const FeatureBag& bag, const std::string& path) {
  if (bag.n < 1 || bag.dim < 1 ||
      bag.features.size() != static_cast<std::size_t>(bag.n) * bag.dim)
    throw ValueError("write_features: inconsistent bag for " + bag.patient);
  std::vector<unsigned char> out;
  out.reserve(16 + 4 * bag.features.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(bag.n));
  put_u32(out, static_cast<std::uint32_t>(bag.dim));
  for (double v : bag.features) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
  std::ofstream of(path, std::ios::binary | std::ios::trunc);
  if (!of) throw FormatError("cannot write " + path);
  of.write(reinterpret_cast<const char*>(out.data()),
           static_cast<std::streamsize>(out.size()));
}

FeatureBag parse_features(const std::vector<unsigned char>& bytes,
                          const std::string& origin) {
  auto fail = [&](std::size_t offset, const std::string& what) {
    throw FormatError(origin + ": " + what + " (byte offset " +
                      std::to_string(offset) + ")");
  };
  if (bytes.size() < 16) fail(bytes.size(), "header truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(0, "bad magic");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kVersion)
    fail(4, "unsupported version " + std::to_string(version));
  const std::uint32_t n = get_u32(bytes, 8);
  const std::uint32_t d = get_u32(bytes, 12);
  if (n == 0) fail(8, "bag must have at least one patch");
  if (d == 0) fail(12, "feature dimension must be positive");
  const std::uint64_t payload = static_cast<std::uint64_t>(n) * d * 4;
  if (bytes.size() != 16 + payload)
    fail(bytes.size() < 16 + payload ? bytes.size() : 16 + payload,
         "file length " + std::to_string(bytes.size()) + " != expected " +
             std::to_string(16 + payload));
  FeatureBag bag;
  bag.n = static_cast<int>(n);
  bag.dim = static_cast<int>(d);
  bag.features.resize(static_cast<std::size_t>(n) * d);
  for (std::size_t i = 0; i < bag.features.size(); ++i) {
    const std::uint32_t bits = get_u32(bytes, 16 + i * 4);
    float f;
    std::memcpy(&f, &bits, 4);
    bag.features[i] = static_cast<double>(f);
  }
  return bag;
}

FeatureBag read_features(const std::string& path) {
  FeatureBag bag = parse_features(slurp(path), path);
  bag.patient = fs::path(path).stem().string();
  return bag;
}

// ---------------------------------------------------------------------------
// Clinical CSV
// ---------------------------------------------------------------------------

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

CsvTable parse_csv(const std::string& text, const std::string& origin) {
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    if (first) {
      table.header = fields;
      first = false;
    } else {
      if (fields.size() != table.header.size())
        throw FormatError(origin + ": row with " +
                          std::to_string(fields.size()) + " fields, header has " +
                          std::to_string(table.header.size()));
      table.rows.push_back(std::move(fields));
    }
  }
  if (first) throw FormatError(origin + ": empty CSV");
  return table;
}

}  // namespace

Cohort load_cohort(const std::string& manifest_path,
                   const std::string& clinical_path,
                   const std::string& main_target,
                   const std::vector<std::string>& aux_targets) {
  json manifest;
  try {
    manifest = json::parse(read_text(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError(manifest_path + ": invalid JSON: " + e.what());
  }
  if (!manifest.contains("dim") || !manifest.contains("slides"))
    throw FormatError(manifest_path + ": manifest needs dim and slides fields");
  const int dim = manifest["dim"].get<int>();
  if (dim <= 0) throw FormatError(manifest_path + ": non-positive dim");

  const CsvTable clinical = parse_csv(read_text(clinical_path), clinical_path);
  const int patient_col = clinical.column("PATIENT");
  if (patient_col < 0)
    throw FormatError(clinical_path + ": missing PATIENT column");
  const int main_col = clinical.column(main_target);
  if (main_col < 0)
    throw ConfigError(clinical_path + ": unknown target column '" +
                      main_target + "'");
  std::vector<int> aux_cols;
  for (const auto& a : aux_targets) {
    const int c = clinical.column(a);
    if (c < 0)
      throw ConfigError(clinical_path + ": unknown target column '" + a + "'");
    aux_cols.push_back(c);
  }

  std::map<std::string, const std::vector<std::string>*> by_patient;
  for (const auto& row : clinical.rows) {
    const std::string& id = row[static_cast<std::size_t>(patient_col)];
    if (!by_patient.emplace(id, &row).second)
      throw CohortError(clinical_path + ": duplicate patient id '" + id + "'");
  }

  Cohort cohort;
  cohort.dim = dim;
  cohort.main_target = main_target;
  cohort.aux_names = aux_targets;

  const fs::path base = fs::path(manifest_path).parent_path();
  std::set<std::string> seen;
  for (const auto& slide : manifest["slides"]) {
    const std::string id = slide.at("patient").get<std::string>();
    if (!seen.insert(id).second)
      throw CohortError(manifest_path + ": duplicate patient id '" + id + "'");
    const std::string file = slide.at("file").get<std::string>();
    const int n = slide.at("n").get<int>();

    auto it = by_patient.find(id);
    if (it == by_patient.end()) {
      cohort.exclusions.push_back({id, "no clinical record"});
      continue;
    }
    const auto& row = *it->second;
    double y;
    if (!parse_double(row[static_cast<std::size_t>(main_col)], y)) {
      cohort.exclusions.push_back({id, "missing " + main_target});
      continue;
    }
    if (y != 0.0 && y != 1.0)
      throw CohortError(clinical_path + ": non-binary " + main_target +
                        " value '" + row[static_cast<std::size_t>(main_col)] +
                        "' for patient " + id);
    std::vector<double> aux(aux_cols.size());
    bool aux_ok = true;
    for (std::size_t k = 0; k < aux_cols.size(); ++k) {
      if (!parse_double(row[static_cast<std::size_t>(aux_cols[k])], aux[k])) {
        cohort.exclusions.push_back({id, "missing " + aux_targets[k]});
        aux_ok = false;
        break;
      }
    }
    if (!aux_ok) continue;

    FeatureBag bag = read_features((base / file).string());
    bag.patient = id;
    if (bag.dim != dim)
      throw FormatError(file + ": feature dim " + std::to_string(bag.dim) +
                        " != manifest dim " + std::to_string(dim));
    if (bag.n != n)
      throw FormatError(file + ": patch count " + std::to_string(bag.n) +
                        " != manifest n " + std::to_string(n));
    cohort.patients.push_back(
        {id, static_cast<int>(y), std::move(aux), std::move(bag)});
  }
  if (cohort.patients.empty())
    throw CohortError("cohort join is empty: no patient has features plus all "
                      "requested labels");
  return cohort;
}

// ---------------------------------------------------------------------------
// Synthetic cohort
// ---------------------------------------------------------------------------

void SynthSpec::validate() const {
  if (patients < 1) throw ConfigError("synth: patients must be >= 1");
  if (dim < 1) throw ConfigError("synth: dim must be >= 1");
  if (bag_min < 1) throw ConfigError("synth: bag_min must be >= 1");
  if (bag_max < bag_min) throw ConfigError("synth: bag_max < bag_min");
  if (signal_dim < 0 || signal_dim > dim)
    throw ConfigError("synth: signal_dim must be in [0, dim]");
  if (flip_noise < 0.0 || flip_noise > 1.0)
    throw ConfigError("synth: flip_noise must be in [0, 1]");
  if (aux_correlation < -1.0 || aux_correlation > 1.0)
    throw ConfigError("synth: aux_correlation must be in [-1, 1]");
}

Cohort synth_cohort(const SynthSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, 0x73796e7468ull));  // "synth"
  Cohort cohort;
  cohort.dim = spec.dim;
  cohort.main_target = "y";
  cohort.aux_names = {"aux"};

  // U(0,1) has mean 1/2 and variance 1/12.
  const double f_std = std::sqrt(1.0 / 12.0);
  const double mu = spec.signal_dim > 0
                        ? spec.signal_shift / std::sqrt(static_cast<double>(spec.signal_dim))
                        : 0.0;

  for (int i = 0; i < spec.patients; ++i) {
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "P%04d", i);
    CohortPatient patient;
    patient.id = idbuf;

    const int n = static_cast<int>(rng.range(spec.bag_min, spec.bag_max));
    const double f = rng.uniform();
    const int n_signal = static_cast<int>(std::floor(f * n + 0.5));

    FeatureBag bag;
    bag.patient = patient.id;
    bag.n = n;
    bag.dim = spec.dim;
    bag.features.resize(static_cast<std::size_t>(n) * spec.dim);
    for (int p = 0; p < n; ++p) {
      const bool signal = p < n_signal;
      for (int d = 0; d < spec.dim; ++d) {
        double v = rng.normal();
        if (signal && d < spec.signal_dim) v += mu;
        // store at float precision so the MTLF round-trip is lossless
        bag.features[static_cast<std::size_t>(p) * spec.dim + d] =
            static_cast<double>(static_cast<float>(v));
      }
    }

    int y = f > spec.label_threshold ? 1 : 0;
    if (rng.uniform() < spec.flip_noise) y = 1 - y;

    const double rho = spec.aux_correlation;
    const double a =
        rho * (f - 0.5) / f_std + std::sqrt(1.0 - rho * rho) * rng.normal();

    patient.label = y;
    patient.aux = {a};
    patient.bag = std::move(bag);
    cohort.patients.push_back(std::move(patient));
  }
  return cohort;
}

void write_cohort(const Cohort& cohort, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "features");
  json manifest;
  manifest["version"] = 1;
  manifest["dim"] = cohort.dim;
  manifest["slides"] = json::array();
  for (const auto& p : cohort.patients) {
    const std::string rel = "features/" + p.id + ".mtlf";
    write_features(p.bag, (fs::path(dir) / rel).string());
    manifest["slides"].push_back(
        {{"patient", p.id}, {"file", rel}, {"n", p.bag.n}});
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";

  std::ofstream cf(fs::path(dir) / "clinical.csv");
  cf << "PATIENT," << cohort.main_target;
  for (const auto& a : cohort.aux_names) cf << "," << a;
  cf << "\n";
  char buf[64];
  for (const auto& p : cohort.patients) {
    cf << p.id << "," << p.label;
    for (double a : p.aux) {
      std::snprintf(buf, sizeof buf, "%.17g", a);
      cf << "," << buf;
    }
    cf << "\n";
  }
}

}  // namespace mtl
