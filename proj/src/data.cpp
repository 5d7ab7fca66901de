#include "pointcmp/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pointcmp::data {

namespace {

// CRC-64/XZ, table-driven.
struct Crc64 {
  uint64_t table[256];
  Crc64() {
    const uint64_t poly = 0xC96C5795D7870F42ULL;
    for (uint64_t i = 0; i < 256; ++i) {
      uint64_t crc = i;
      for (int b = 0; b < 8; ++b) crc = (crc & 1) ? (crc >> 1) ^ poly : crc >> 1;
      table[i] = crc;
    }
  }
  uint64_t update(uint64_t crc, const void* buf, size_t len) const {
    const auto* p = static_cast<const unsigned char*>(buf);
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xff] ^ (crc >> 8);
    return crc;
  }
};

const Crc64& crc64() {
  static const Crc64 c;
  return c;
}

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }

Vec3 rotate_z(Vec3 p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

// Uniform point on a sphere surface.
Vec3 sphere_point(Rng& rng, double radius) {
  double x = rng.normal(), y = rng.normal(), z = rng.normal();
  double n = std::sqrt(x * x + y * y + z * z);
  while (n < 1e-9) {
    x = rng.normal();
    y = rng.normal();
    z = rng.normal();
    n = std::sqrt(x * x + y * y + z * z);
  }
  return {radius * x / n, radius * y / n, radius * z / n};
}

// Shared body: large lobe at the origin plus a small lobe offset along +x.
// All classes draw from this same shape; only the motion differs.
Vec3 body_point(Rng& rng) {
  if (rng.next_double() < 0.7) return sphere_point(rng, 0.5);
  Vec3 p = sphere_point(rng, 0.22);
  return {p.x + 0.62, p.y, p.z};
}

struct Motion {
  int kind = 0;     // 0 translate, 1 orbit+spin, 2 oscillate
  Vec3 start;       // initial body center
  double heading = 0.0;   // direction / phase base
  double rate = 0.0;      // per-frame speed / angular rate
  double amplitude = 0.0; // oscillation / orbit radius
  double yaw0 = 0.0;      // initial body yaw

  // Body center and yaw at frame t. Every motion starts at `start` so a
  // single frame carries no class signal.
  void at(int t, Vec3& center, double& yaw) const {
    const double ft = static_cast<double>(t);
    switch (kind) {
      case 0: {
        Vec3 dir{std::cos(heading), std::sin(heading), 0.15};
        center = start + (rate * ft) * dir;
        yaw = yaw0;
        break;
      }
      case 1: {
        const double a = heading + rate * ft;
        center = start + Vec3{amplitude * (std::cos(a) - std::cos(heading)),
                              amplitude * (std::sin(a) - std::sin(heading)), 0.0};
        yaw = yaw0 + rate * ft;  // spins while orbiting
        break;
      }
      default: {
        const double s = amplitude * (std::sin(heading * 0.3 + rate * ft) -
                                      std::sin(heading * 0.3));
        Vec3 axis{std::cos(heading), std::sin(heading), 0.0};
        center = start + s * axis;
        yaw = yaw0;
        break;
      }
    }
  }
};

// Per-frame speeds are drawn from one shared range for every archetype so
// speed statistics alone cannot identify the class; only the trajectory shape
// (line / arc / reversal) does.
Motion make_motion(int class_id, Rng& rng) {
  Motion m;
  m.kind = class_id % 3;
  const int tier = class_id / 3;
  const double tier_boost = 1.0 + 0.6 * tier;
  const double tier_turn = 0.7 * tier;  // distinct headings for higher tiers
  m.start = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3)};
  m.yaw0 = rng.uniform(0.0, 0.5);
  m.heading = tier_turn + rng.uniform(-0.7, 0.7);
  const double speed = tier_boost * rng.uniform(0.08, 0.16);
  switch (m.kind) {
    case 0:
      m.rate = speed;
      break;
    case 1:
      m.amplitude = rng.uniform(0.5, 0.8);
      m.rate = speed / m.amplitude;  // tangential speed matches the shared range
      break;
    default:
      m.rate = rng.uniform(0.35, 0.45);
      m.amplitude = speed / (0.64 * m.rate);  // mean |velocity| matches the range
      break;
  }
  return m;
}

const char* kKindNames[3] = {"translate", "orbit", "oscillate"};

}  // namespace

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("generate_synthetic_dataset: need >= 2 classes");
  if (spec.videos_per_class < 1 || spec.frames < 1 || spec.points_per_frame < 1) {
    throw ConfigError("generate_synthetic_dataset: sizes must be positive");
  }
  Dataset ds;
  ds.num_classes = static_cast<uint32_t>(spec.num_classes);
  ds.seed = spec.seed;
  {
    std::ostringstream g;
    g << "synthetic classes=" << spec.num_classes << " videos_per_class=" << spec.videos_per_class
      << " frames=" << spec.frames << " points_per_frame=" << spec.points_per_frame
      << " seed=" << spec.seed;
    ds.generator = g.str();
  }
  for (int c = 0; c < spec.num_classes; ++c) {
    std::ostringstream name;
    name << kKindNames[c % 3] << "_t" << (c / 3);
    ds.class_names.push_back(name.str());
  }
  const double noise = 0.02;
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int v = 0; v < spec.videos_per_class; ++v) {
      Rng rng(derive_seed(spec.seed, 0x9eadULL, static_cast<uint64_t>(c), static_cast<uint64_t>(v)));
      Motion motion = make_motion(c, rng);
      PointCloudVideo video;
      video.label = static_cast<uint32_t>(c);
      {
        std::ostringstream id;
        id << "c" << c << "_v" << v;
        video.video_id = id.str();
      }
      video.frames.reserve(static_cast<size_t>(spec.frames));
      for (int t = 0; t < spec.frames; ++t) {
        Vec3 center;
        double yaw = 0.0;
        motion.at(t, center, yaw);
        FramePoints pts;
        pts.reserve(static_cast<size_t>(spec.points_per_frame));
        for (int p = 0; p < spec.points_per_frame; ++p) {
          Vec3 local = rotate_z(body_point(rng), yaw);
          Vec3 world = center + local;
          pts.push_back({static_cast<float>(world.x + noise * rng.normal()),
                         static_cast<float>(world.y + noise * rng.normal()),
                         static_cast<float>(world.z + noise * rng.normal())});
        }
        video.frames.push_back(std::move(pts));
      }
      ds.videos.push_back(std::move(video));
    }
  }
  return ds;
}

Clip sample_clip(const PointCloudVideo& video, int num_frames, int stride, int points_per_frame,
                 Rng& rng) {
  if (num_frames <= 0 || stride <= 0) throw ConfigError("sample_clip: num_frames/stride must be positive");
  if (points_per_frame <= 0) throw ConfigError("sample_clip: points_per_frame must be positive");
  if (video.frames.empty()) throw DataError("sample_clip: empty video");
  const int t_raw = static_cast<int>(video.frames.size());
  const int span = (num_frames - 1) * stride + 1;
  int start = 0;
  const bool looped = t_raw < span;
  if (!looped) start = static_cast<int>(rng.next_below(static_cast<uint64_t>(t_raw - span + 1)));

  Clip clip;
  clip.label = video.label;
  clip.frames.reserve(static_cast<size_t>(num_frames));
  clip.timestamps.reserve(static_cast<size_t>(num_frames));
  for (int i = 0; i < num_frames; ++i) {
    const int nominal = start + i * stride;
    const int src = looped ? nominal % t_raw : nominal;
    clip.timestamps.push_back(nominal);
    const FramePoints& fp = video.frames[static_cast<size_t>(src)];
    const int avail = static_cast<int>(fp.size());
    if (avail == 0) throw DataError("sample_clip: empty frame");
    std::vector<int> pick;
    if (avail >= points_per_frame) {
      pick = rng.sample_without_replacement(avail, points_per_frame);
    } else {
      pick.reserve(static_cast<size_t>(points_per_frame));
      for (int p = 0; p < avail; ++p) pick.push_back(p);
      for (int p = avail; p < points_per_frame; ++p) {
        pick.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(avail))));
      }
    }
    Tensor frame(points_per_frame, 3);
    for (int p = 0; p < points_per_frame; ++p) {
      for (int d = 0; d < 3; ++d) {
        frame(p, d) = static_cast<double>(fp[static_cast<size_t>(pick[static_cast<size_t>(p)])]
                                            [static_cast<size_t>(d)]);
      }
    }
    clip.frames.push_back(std::move(frame));
  }
  return clip;
}

SegmentedClip segment_clip(const Clip& clip, int L) {
  const int t = clip.num_frames();
  if (L <= 0 || t % L != 0) throw ConfigError("segment_clip: L must divide clip length");
  SegmentedClip seg;
  seg.L = L;
  seg.frames_per_segment = t / L;
  seg.frames = clip.frames;
  seg.timestamps = clip.timestamps;
  seg.label = clip.label;
  return seg;
}

Clip random_scale(const Clip& clip, double lo, double hi, Rng& rng) {
  if (lo <= 0.0 || lo > hi) throw ConfigError("random_scale: require 0 < lo <= hi");
  const double s = rng.uniform(lo, hi);
  Clip out = clip;
  for (auto& frame : out.frames) {
    for (int64_t i = 0; i < frame.numel(); ++i) frame[i] *= s;
  }
  return out;
}

namespace {

void put_u32(std::string& buf, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

void put_f32(std::string& buf, float v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  uint32_t u32() {
    if (pos + 4 > buf.size()) throw DataError("dataset file truncated");
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  float f32() {
    if (pos + 4 > buf.size()) throw DataError("dataset file truncated");
    float v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::string bytes(size_t n) {
    if (pos + n > buf.size()) throw DataError("dataset file truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
  std::string payload;
  put_u32(payload, static_cast<uint32_t>(ds.videos.size()));
  put_u32(payload, ds.num_classes);
  std::vector<uint64_t> offsets;
  for (const auto& video : ds.videos) {
    offsets.push_back(4 + payload.size());  // absolute file offset (after magic)
    put_u32(payload, static_cast<uint32_t>(video.video_id.size()));
    payload.append(video.video_id);
    put_u32(payload, video.label);
    put_u32(payload, static_cast<uint32_t>(video.frames.size()));
    for (const auto& frame : video.frames) {
      put_u32(payload, static_cast<uint32_t>(frame.size()));
      for (const auto& p : frame) {
        put_f32(payload, p[0]);
        put_f32(payload, p[1]);
        put_f32(payload, p[2]);
      }
    }
  }
  const uint64_t crc = crc64().update(~0ULL, payload.data(), payload.size()) ^ ~0ULL;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_dataset: cannot open " + path);
  out.write("PCV1", 4);
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  char cb[8];
  std::memcpy(cb, &crc, 8);
  out.write(cb, 8);
  if (!out) throw DataError("write_dataset: write failed for " + path);
  out.close();

  std::ofstream man(path + ".manifest", std::ios::trunc);
  if (!man) throw DataError("write_dataset: cannot open manifest for " + path);
  man << "format: PCV1\n";
  man << "num_videos: " << ds.videos.size() << "\n";
  man << "num_classes: " << ds.num_classes << "\n";
  for (size_t i = 0; i < ds.class_names.size(); ++i) {
    man << "class_" << i << ": " << ds.class_names[i] << "\n";
  }
  man << "seed: " << ds.seed << "\n";
  man << "generator: " << ds.generator << "\n";
  for (size_t i = 0; i < offsets.size(); ++i) {
    man << "offset_" << i << ": " << offsets[i] << "\n";
  }
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_dataset: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string all = ss.str();
  if (all.size() < 4) throw DataError("dataset file truncated");
  if (all.compare(0, 3, "PCV") != 0) throw DataError("dataset format error: bad magic");
  if (all.compare(0, 4, "PCV1") != 0) {
    throw DataError("dataset version mismatch: got " + all.substr(0, 4) + ", expected PCV1");
  }
  if (all.size() < 4 + 8 + 8) throw DataError("dataset file truncated");
  const std::string payload = all.substr(4, all.size() - 12);

  // Structural parse first so truncation is reported as truncation; the
  // checksum then catches same-length corruption.
  Reader r{payload};
  Dataset ds;
  const uint32_t num_videos = r.u32();
  ds.num_classes = r.u32();
  ds.videos.reserve(num_videos);
  for (uint32_t i = 0; i < num_videos; ++i) {
    PointCloudVideo video;
    const uint32_t id_len = r.u32();
    video.video_id = r.bytes(id_len);
    video.label = r.u32();
    const uint32_t t_raw = r.u32();
    video.frames.reserve(t_raw);
    for (uint32_t t = 0; t < t_raw; ++t) {
      const uint32_t pt = r.u32();
      FramePoints fp;
      fp.reserve(pt);
      for (uint32_t p = 0; p < pt; ++p) {
        float x = r.f32(), y = r.f32(), z = r.f32();
        fp.push_back({x, y, z});
      }
      video.frames.push_back(std::move(fp));
    }
    ds.videos.push_back(std::move(video));
  }
  if (r.pos != payload.size()) throw DataError("dataset file has trailing bytes");

  uint64_t stored_crc;
  std::memcpy(&stored_crc, all.data() + all.size() - 8, 8);
  const uint64_t crc = crc64().update(~0ULL, payload.data(), payload.size()) ^ ~0ULL;
  if (crc != stored_crc) throw DataError("dataset checksum failure");
  return ds;
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path + ".manifest");
  if (!in) throw DataError("read_manifest: cannot open manifest for " + path);
  DatasetManifest m;
  std::string line;
  while (std::getline(in, line)) {
    const auto colon = line.find(": ");
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    const std::string val = line.substr(colon + 2);
    if (key == "format") {
      m.version = val;
    } else if (key == "num_videos") {
      m.num_videos = static_cast<uint32_t>(std::stoul(val));
    } else if (key == "num_classes") {
      m.num_classes = static_cast<uint32_t>(std::stoul(val));
    } else if (key == "seed") {
      m.seed = std::stoull(val);
    } else if (key == "generator") {
      m.generator = val;
    } else if (key.rfind("class_", 0) == 0) {
      m.class_names.push_back(val);
    } else if (key.rfind("offset_", 0) == 0) {
      m.offsets.push_back(std::stoull(val));
    }
  }
  if (m.offsets.size() != m.num_videos) {
    throw DataError("manifest record count does not match header");
  }
  for (size_t i = 1; i < m.offsets.size(); ++i) {
    if (m.offsets[i] <= m.offsets[i - 1]) throw DataError("manifest offsets not increasing");
  }
  return m;
}

void stratified_split(const Dataset& ds, double train_fraction, uint64_t seed,
                      std::vector<int>& train_idx, std::vector<int>& test_idx) {
  train_idx.clear();
  test_idx.clear();
  std::vector<std::vector<int>> by_class(ds.num_classes);
  for (size_t i = 0; i < ds.videos.size(); ++i) {
    by_class[ds.videos[i].label].push_back(static_cast<int>(i));
  }
  for (uint32_t c = 0; c < ds.num_classes; ++c) {
    auto& members = by_class[c];
    Rng rng(derive_seed(seed, 0x57a7ULL, c));
    rng.shuffle(members);
    size_t n_train = static_cast<size_t>(train_fraction * static_cast<double>(members.size()));
    if (n_train == members.size() && !members.empty()) --n_train;
    for (size_t i = 0; i < members.size(); ++i) {
      (i < n_train ? train_idx : test_idx).push_back(members[i]);
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
}

}  // namespace pointcmp::data
