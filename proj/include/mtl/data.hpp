#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtl/errors.hpp"

namespace mtl {

/// One patient's bag of patch feature vectors. Features are stored as
/// 32-bit floats on disk and widened to 64-bit in memory; values held here
/// are always exactly representable in 32 bits so write/read round-trips
/// bit for bit.
struct FeatureBag {
  std::string patient;
  int n = 0;    // patches, >= 1
  int dim = 0;  // feature dimension
  std::vector<double> features;  // row-major n x dim

  double at(int row, int col) const {
    return features[static_cast<std::size_t>(row) * dim + col];
  }
};

/// MTLF container: magic "MTLF", u32 LE version = 1, u32 LE n, u32 LE d,
/// then n*d little-endian 32-bit floats, row-major. Total size must be
/// exactly 16 + 4*n*d bytes.
void write_features(const FeatureBag& bag, const std::string& path);
FeatureBag read_features(const std::string& path);
/// Parses an in-memory MTLF image (the file reader and fuzz tests share it).
FeatureBag parse_features(const std::vector<unsigned char>& bytes,
                          const std::string& origin);

struct CohortPatient {
  std::string id;
  int label = 0;                 // main task y
  std::vector<double> aux;       // auxiliary regression targets
  FeatureBag bag;
};

struct Exclusion {
  std::string patient;
  std::string reason;
};

/// Patient-level join of features and clinical targets, in manifest order.
struct Cohort {
  int dim = 0;
  std::string main_target;
  std::vector<std::string> aux_names;
  std::vector<CohortPatient> patients;
  std::vector<Exclusion> exclusions;

  std::size_t size() const { return patients.size(); }
};

/// Inner join of a feature manifest (JSON: {version, dim, slides:[{patient,
/// file, n}]}) with a clinical CSV (UTF-8, comma-separated, header row with
/// a PATIENT column; blank cell = missing). Patients missing the main label
/// or any requested auxiliary label are excluded and reported. Duplicate
/// patient ids raise CohortError; unknown target columns raise ConfigError.
Cohort load_cohort(const std::string& manifest_path,
                   const std::string& clinical_path,
                   const std::string& main_target,
                   const std::vector<std::string>& aux_targets);

/// Synthetic cohort: bags mix background patches N(0, I) with signal
/// patches mean-shifted inside the first signal_dim coordinates. The signal
/// fraction f ~ U(0,1) drives both the label (y = 1{f > threshold}, flipped
/// with probability flip_noise) and the auxiliary target
/// a = rho * standardize(f) + sqrt(1 - rho^2) * N(0,1).
struct SynthSpec {
  int patients = 100;
  int dim = 32;
  int bag_min = 16;
  int bag_max = 64;
  int signal_dim = 4;
  double signal_shift = 2.0;
  double label_threshold = 0.5;
  double flip_noise = 0.0;
  double aux_correlation = 0.8;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

/// Deterministic given the spec seed. Main target column is "y", the
/// auxiliary column is "aux".
Cohort synth_cohort(const SynthSpec& spec);

/// Writes a cohort to dir as manifest.json + features/<patient>.mtlf +
/// clinical.csv, the same layout load_cohort consumes.
void write_cohort(const Cohort& cohort, const std::string& dir);

}  // namespace mtl
