#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "bya/tensor_store.hpp"

namespace bya {

enum class TrajectoryKind : int { still = 0, parallel = 1, crossing = 2, single = 3 };

std::string to_string(TrajectoryKind kind);
TrajectoryKind trajectory_kind_from_string(const std::string& name);
inline int prompt_id_of(TrajectoryKind kind) { return static_cast<int>(kind); }
inline constexpr int kPromptClasses = 4;

using Rgb = std::array<float, 3>;

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Disc motion: character i is at start[i] + frame * velocity[i].
struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::still;
  double radius = 7.0;
  std::vector<Rgb> colors;
  std::vector<Point> start;
  std::vector<Point> velocity;

  int characters() const { return static_cast<int>(colors.size()); }
};

struct ClipDims {
  int frames = 8;
  int height = 32;
  int width = 32;
  int audio_frames = 32;
  int audio_dim = 8;
  int ref_size = 16;
};

/// Pixel rectangle [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  bool operator==(const Box&) const = default;
};

struct ClipRecord {
  Tensor video;        // T x 3 x H x W f32 in [0,1]
  Tensor gt_masks;     // n x T x H x W u8, disjoint
  Tensor audio_feats;  // n x T_a x d_a, indexed by audio stream
  Tensor envelopes;    // n x T_a in [0,1], indexed by audio stream
  Tensor a_ac;         // n x n u8 permutation; a_ac[a][c] = 1 binds audio a to character c
  Tensor refs;         // n x 3 x R x R
  Tensor ref_masks;    // n x R x R u8
  Tensor inpaint;      // 3 x H x W
  int prompt_id = 0;
  TrajectoryKind kind = TrajectoryKind::still;
  std::vector<std::vector<Box>> mouth_boxes;  // [character][frame]
  std::uint64_t seed = 0;
  int n_chars = 2;
};

inline constexpr float kBackgroundLevel = 0.25f;
inline constexpr std::uint64_t kAudioFeatureSeed = 0xB1D5EEDull;

/// A standard trajectory of the given kind with seeded colors and jitter.
/// The whole motion is a function of the kind and the frame-0 positions.
TrajectorySpec make_trajectory(TrajectoryKind kind, const ClipDims& dims, std::mt19937_64& rng);

ClipRecord gen_clip(const TrajectorySpec& spec, const ClipDims& dims, std::uint64_t seed);

/// feats[t] = envelope[t] * p + b with unit-norm p; p and b derive from `seed`.
Tensor envelope_to_features(std::span<const float> envelope, std::uint64_t seed, int audio_dim);

struct FeatureBasis {
  std::vector<float> direction;  // unit norm
  std::vector<float> offset;
};
FeatureBasis feature_basis(std::uint64_t seed, int audio_dim);

/// Least-squares recovery of the envelope from T_a x d_a features.
std::vector<float> features_to_envelope(const Tensor& feats, std::size_t stream, std::uint64_t seed);

/// Block mean of an audio-rate signal down to `frames` samples.
std::vector<double> to_frame_rate(std::span<const float> audio_rate, int frames);

/// Mean brightness (channel mean) of a pixel box in frame t.
double region_brightness(const Tensor& video, int t, const Box& box);

double pearson(std::span<const double> a, std::span<const double> b);

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::string split;
  int prompt_id = 0;
  TrajectoryKind kind = TrajectoryKind::still;
  int n_chars = 2;
  std::vector<std::vector<int>> a_ac;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::uint64_t seed = 0;
  double mix = 0.0;
  double test_fraction = 0.1;
  ClipDims dims;
  std::vector<ManifestEntry> clips;

  std::vector<const ManifestEntry*> split(const std::string& name) const;
};

struct DatasetOptions {
  int count = 0;
  double mix = 0.0;  // fraction of single-character clips
  double test_fraction = 0.1;
  ClipDims dims;
};

DatasetManifest gen_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir, std::uint64_t seed);

void save_clip(const ClipRecord& clip, const std::filesystem::path& dir, const std::string& split);
ClipRecord load_clip(const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& manifest_path);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace bya
