#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pointcmp/common.hpp"
#include "pointcmp/tensor.hpp"

namespace pointcmp::data {

// Coordinates are kept as float32 in memory so the on-disk format round-trips
// bit-exactly; math code promotes to double at clip-sampling time.
using FramePoints = std::vector<std::array<float, 3>>;

struct PointCloudVideo {
  std::string video_id;
  uint32_t label = 0;
  std::vector<FramePoints> frames;
};

struct Dataset {
  std::vector<PointCloudVideo> videos;
  uint32_t num_classes = 0;
  std::vector<std::string> class_names;
  std::string generator;  // human-readable generator spec for the manifest
  uint64_t seed = 0;
};

struct Clip {
  std::vector<Tensor> frames;   // T frames, each (P x 3) double
  std::vector<int> timestamps;  // nominal source frame indices, evenly strided
  uint32_t label = 0;

  int num_frames() const { return static_cast<int>(frames.size()); }
};

// Contiguous, disjoint, ordered partition of a clip into L segments.
struct SegmentedClip {
  int L = 0;
  int frames_per_segment = 0;
  std::vector<Tensor> frames;
  std::vector<int> timestamps;
  uint32_t label = 0;

  int num_frames() const { return static_cast<int>(frames.size()); }
  // Clip-frame index range [begin, end) of segment l.
  int segment_begin(int l) const { return l * frames_per_segment; }
  int segment_end(int l) const { return (l + 1) * frames_per_segment; }
};

struct SyntheticSpec {
  int num_classes = 3;
  int videos_per_class = 10;
  int frames = 24;
  int points_per_frame = 256;
  uint64_t seed = 0;
};

// Classes share one two-lobe body (shape-identical) and differ only in how it
// moves: translation, orbit with spin, or oscillation, with per-video jitter.
Dataset generate_synthetic_dataset(const SyntheticSpec& spec);

Clip sample_clip(const PointCloudVideo& video, int num_frames, int stride, int points_per_frame,
                 Rng& rng);
SegmentedClip segment_clip(const Clip& clip, int L);
Clip random_scale(const Clip& clip, double lo, double hi, Rng& rng);

struct DatasetManifest {
  std::string version;
  uint32_t num_videos = 0;
  uint32_t num_classes = 0;
  std::vector<std::string> class_names;
  std::string generator;
  uint64_t seed = 0;
  std::vector<uint64_t> offsets;  // byte offset of each video record
};

// Binary container (magic PCV1, LE u32 header, per-video records, trailing
// CRC-64 of everything after the magic) plus a human-readable manifest sidecar
// at <path>.manifest.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);
DatasetManifest read_manifest(const std::string& path);

// Seed-fixed stratified split; fraction applies per class (rounded down, at
// least one test element per class when possible).
void stratified_split(const Dataset& ds, double train_fraction, uint64_t seed,
                      std::vector<int>& train_idx, std::vector<int>& test_idx);

}  // namespace pointcmp::data
