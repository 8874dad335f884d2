#pragma once

// Dataset schema, manifest/PNM ingestion, lab-vector normalization, the
// synthetic coupled-modality generator, patient-level splitting, and the
// NVC1 checkpoint container.

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mednvc/errors.hpp"
#include "mednvc/params.hpp"
#include "mednvc/rng.hpp"

namespace mednvc {

inline constexpr int kLabDim = 14;

// Manifest column order. joint and position are separate columns on disk and
// merge into one joint-position code (2*joint + position) at ingestion, which
// is what keeps the serialized vector at length 14.
extern const std::array<const char*, 18> kManifestColumns;
extern const std::array<const char*, kLabDim> kFeatureNames;

using LabVec = std::array<double, kLabDim>;

struct Sample {
    std::string patient_id;
    std::string image_path;
    int label = 0;
    LabVec lab{};
    int width = 0, height = 0;
    std::vector<float> image;  // 3*height*width, values in [0,1]
};

struct NormStats {
    LabVec mean{};
    LabVec stdev{};  // clamped to >= 1e-6
};

// ---- images ----------------------------------------------------------------

struct RawImage {
    int w = 0, h = 0, channels = 1;  // 1 (P5) or 3 (P6), interleaved rows
    std::vector<std::uint8_t> pixels;
};

RawImage read_pnm(const std::string& path);
void write_pgm(const std::string& path, int w, int h, const std::vector<std::uint8_t>& gray);

// 3-channel CHW float in [0,1]; grayscale replicates.
std::vector<float> to_chw(const RawImage& img);
std::vector<float> bilinear_resize(const std::vector<float>& chw, int c, int h, int w, int oh,
                                   int ow);

void hflip_image(std::vector<float>& chw, int c, int h, int w);
// Rotation about the image center (bilinear, zero padding); deg == 0 is the
// bitwise identity.
void rotate_image(std::vector<float>& chw, int c, int h, int w, double deg);

// Horizontal flip with probability 0.5, then rotation by a uniform angle in
// [-15, +15] degrees. Both draws always happen, so the rng stream position
// does not depend on outcomes.
void augment_image(std::vector<float>& chw, int c, int h, int w, Rng& rng);

// ---- manifest --------------------------------------------------------------

// Reads the CSV manifest and every referenced image (resized to target_size).
// Rows sharing a patient_id must agree on record and label.
std::vector<Sample> load_dataset(const std::string& manifest_path, int target_size = 224);

// ---- normalization ---------------------------------------------------------

NormStats compute_norm_stats(const std::vector<Sample>& train);
LabVec normalize_lab(const LabVec& lab, const NormStats& st);
LabVec denormalize_lab(const LabVec& norm, const NormStats& st);

// ---- synthetic data --------------------------------------------------------

enum class Coupling { xor_both, vision_only, numeric_only };
Coupling coupling_from_string(const std::string& s);
std::string to_string(Coupling c);

// Balanced two-class set; hidden image bit = bright square quadrant, hidden
// numeric bit = CRP/ESR offset, label wired per the coupling.
std::vector<Sample> synth_dataset(int n, std::uint64_t seed, Coupling coupling, int size = 224);

// Writes img_%04d.pgm files plus manifest.csv into dir.
void write_dataset(const std::string& dir, const std::vector<Sample>& samples);

// ---- splitting -------------------------------------------------------------

// Deterministic patient-level split, stratified by label; all images of a
// patient land on one side. Returns (train, eval).
std::pair<std::vector<Sample>, std::vector<Sample>> split_dataset(
    const std::vector<Sample>& all, double eval_frac, std::uint64_t seed);

// ---- checkpoints -----------------------------------------------------------

struct Checkpoint {
    nlohmann::json config;
    bool has_stats = false;
    NormStats stats;
    std::vector<std::string> order;  // tensor-table order
    std::unordered_map<std::string, std::pair<std::vector<int>, std::vector<float>>> tensors;
};

void save_checkpoint(const std::string& path, const ParamSet<float>& params,
                     const nlohmann::json& config, const NormStats* stats);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint tensors into params by name. With require_all, every
// param must be present (full restore); otherwise only names passing the
// prefix filter are copied (stage transfer). Shape mismatches throw.
std::size_t load_into(ParamSet<float>& params, const Checkpoint& ck,
                      const std::string& prefix = "", bool require_all = false);

}  // namespace mednvc
