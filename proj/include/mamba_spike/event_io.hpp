#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mamba_spike/error.hpp"
#include "mamba_spike/rng.hpp"
#include "mamba_spike/tensor.hpp"

namespace mamba_spike {

/// One address-event: timestamp in microseconds, pixel coordinates, polarity
/// (0 = OFF / intensity decrease, 1 = ON / increase).
struct EventRecord {
  std::uint32_t t = 0;
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint8_t polarity = 0;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

/// Time-ordered list of events from one sensor-sized recording.
struct EventStream {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::vector<EventRecord> records;
  std::optional<int> label;

  std::uint32_t duration_us() const { return records.empty() ? 0 : records.back().t + 1; }
};

/// Frame dataset with pixel values normalized to [0, 1].
struct ImageSet {
  Tensor images;  // [N x H x W]
  std::vector<int> labels;
};

namespace detail {

inline void check_stream_valid(const EventStream& s, const char* op) {
  std::uint32_t prev = 0;
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    const EventRecord& r = s.records[i];
    if (r.x >= s.width || r.y >= s.height) {
      throw FormatError(std::string(op) + ": event " + std::to_string(i) + " at (" +
                        std::to_string(r.x) + "," + std::to_string(r.y) + ") outside sensor " +
                        std::to_string(s.width) + "x" + std::to_string(s.height));
    }
    if (r.polarity > 1) {
      throw FormatError(std::string(op) + ": event " + std::to_string(i) + " has polarity " +
                        std::to_string(r.polarity));
    }
    if (i > 0 && r.t < prev) {
      throw FormatError(std::string(op) + ": timestamps not sorted at record " + std::to_string(i));
    }
    prev = r.t;
  }
}

inline void put_u16le(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32le(std::string& buf, std::uint32_t v) {
  put_u16le(buf, static_cast<std::uint16_t>(v & 0xffff));
  put_u16le(buf, static_cast<std::uint16_t>(v >> 16));
}

inline void put_u64le(std::string& buf, std::uint64_t v) {
  put_u32le(buf, static_cast<std::uint32_t>(v & 0xffffffffull));
  put_u32le(buf, static_cast<std::uint32_t>(v >> 32));
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string origin)
      : data_(data), origin_(std::move(origin)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint16_t u16le() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | (static_cast<std::uint16_t>(u8()) << 8));
  }
  std::uint32_t u32le() {
    const std::uint32_t lo = u16le();
    return lo | (static_cast<std::uint32_t>(u16le()) << 16);
  }
  std::uint64_t u64le() {
    const std::uint64_t lo = u32le();
    return lo | (static_cast<std::uint64_t>(u32le()) << 32);
  }
  std::uint32_t u32be() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | u8();
    return v;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(origin_ + ": truncated (need " + std::to_string(n) + " more bytes at offset " +
                        std::to_string(pos_) + ")");
    }
  }
  const std::string& origin() const { return origin_; }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// AER container
// ---------------------------------------------------------------------------
// Little-endian layout: magic "AERS", version u16 = 1, width u16, height u16,
// record count u64; then per record t u32 (us), x u16, y u16, polarity u8,
// pad u8 (zero).

inline std::string serialize_aer(const EventStream& s) {
  detail::check_stream_valid(s, "serialize_aer");
  std::string buf;
  buf.reserve(18 + 10 * s.records.size());
  buf += "AERS";
  detail::put_u16le(buf, 1);
  detail::put_u16le(buf, s.width);
  detail::put_u16le(buf, s.height);
  detail::put_u64le(buf, s.records.size());
  for (const EventRecord& r : s.records) {
    detail::put_u32le(buf, r.t);
    detail::put_u16le(buf, r.x);
    detail::put_u16le(buf, r.y);
    buf.push_back(static_cast<char>(r.polarity));
    buf.push_back('\0');
  }
  return buf;
}

inline EventStream parse_aer(const std::string& bytes, const std::string& origin = "<memory>") {
  detail::ByteReader rd(bytes, origin);
  rd.need(18);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(rd.u8());
  if (std::string(magic, 4) != "AERS") {
    throw FormatError(origin + ": bad magic (expected \"AERS\")");
  }
  const std::uint16_t version = rd.u16le();
  if (version != 1) {
    throw FormatError(origin + ": unsupported version " + std::to_string(version));
  }
  EventStream s;
  s.width = rd.u16le();
  s.height = rd.u16le();
  const std::uint64_t count = rd.u64le();
  if (rd.remaining() != count * 10) {
    throw FormatError(origin + ": record section is " + std::to_string(rd.remaining()) +
                      " bytes, expected " + std::to_string(count * 10));
  }
  s.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    EventRecord r;
    r.t = rd.u32le();
    r.x = rd.u16le();
    r.y = rd.u16le();
    r.polarity = rd.u8();
    const std::uint8_t pad = rd.u8();
    if (pad != 0) {
      throw FormatError(origin + ": nonzero pad byte in record " + std::to_string(i));
    }
    s.records.push_back(r);
  }
  detail::check_stream_valid(s, origin.c_str());
  return s;
}

inline void write_aer(const EventStream& s, const std::string& path) {
  detail::write_file_bytes(path, serialize_aer(s));
}

inline EventStream read_aer(const std::string& path) {
  return parse_aer(detail::read_file_bytes(path), path);
}

// ---------------------------------------------------------------------------
// IDX container (big-endian, per the public format)
// ---------------------------------------------------------------------------

namespace detail {

struct IdxPayload {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> bytes;
};

inline IdxPayload parse_idx(const std::string& data, const std::string& origin,
                            std::uint8_t expect_ndims) {
  ByteReader rd(data, origin);
  const std::uint32_t magic = rd.u32be();
  if ((magic >> 16) != 0 || ((magic >> 8) & 0xff) != 0x08) {
    throw FormatError(origin + ": bad IDX magic");
  }
  const std::uint8_t ndims = static_cast<std::uint8_t>(magic & 0xff);
  if (ndims != expect_ndims) {
    throw FormatError(origin + ": expected " + std::to_string(expect_ndims) + " dimensions, found " +
                      std::to_string(ndims));
  }
  IdxPayload out;
  std::size_t total = 1;
  for (std::uint8_t i = 0; i < ndims; ++i) {
    const std::uint32_t d = rd.u32be();
    if (d == 0) throw FormatError(origin + ": zero-sized dimension " + std::to_string(i));
    out.dims.push_back(d);
    total *= d;
  }
  if (rd.remaining() != total) {
    throw FormatError(origin + ": payload is " + std::to_string(rd.remaining()) +
                      " bytes, header promises " + std::to_string(total));
  }
  out.bytes.resize(total);
  for (std::size_t i = 0; i < total; ++i) out.bytes[i] = rd.u8();
  return out;
}

}  // namespace detail

/// Reads an IDX image file (magic 0x00000803) into [N x H x W] pixels in [0,1].
/// When labels_path is given, the matching IDX label file (magic 0x00000801)
/// fills ImageSet::labels; otherwise labels are left empty.
inline ImageSet read_idx(const std::string& images_path, const std::string& labels_path = "") {
  detail::IdxPayload img = detail::parse_idx(detail::read_file_bytes(images_path), images_path, 3);
  std::vector<double> pixels(img.bytes.size());
  for (std::size_t i = 0; i < img.bytes.size(); ++i) {
    pixels[i] = static_cast<double>(img.bytes[i]) / 255.0;
  }
  ImageSet set;
  set.images = Tensor::from_data({img.dims[0], img.dims[1], img.dims[2]}, std::move(pixels));
  if (!labels_path.empty()) {
    detail::IdxPayload lab = detail::parse_idx(detail::read_file_bytes(labels_path), labels_path, 1);
    if (lab.dims[0] != img.dims[0]) {
      throw FormatError(labels_path + ": " + std::to_string(lab.dims[0]) + " labels for " +
                        std::to_string(img.dims[0]) + " images");
    }
    set.labels.assign(lab.bytes.begin(), lab.bytes.end());
  }
  return set;
}

inline void write_idx_images(const std::string& path, const Tensor& images) {
  if (images.rank() != 3) {
    throw ShapeError("write_idx_images: [N x H x W] required, got " + shape_str(images.shape()));
  }
  std::string buf;
  buf.push_back('\0');
  buf.push_back('\0');
  buf.push_back(static_cast<char>(0x08));
  buf.push_back(static_cast<char>(3));
  for (std::size_t d : images.shape()) {
    for (int b = 3; b >= 0; --b) buf.push_back(static_cast<char>((d >> (8 * b)) & 0xff));
  }
  for (double v : images.data()) {
    const double clipped = std::min(1.0, std::max(0.0, v));
    buf.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(clipped * 255.0))));
  }
  detail::write_file_bytes(path, buf);
}

inline void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::string buf;
  buf.push_back('\0');
  buf.push_back('\0');
  buf.push_back(static_cast<char>(0x08));
  buf.push_back(static_cast<char>(1));
  const std::size_t n = labels.size();
  for (int b = 3; b >= 0; --b) buf.push_back(static_cast<char>((n >> (8 * b)) & 0xff));
  for (int v : labels) buf.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
  detail::write_file_bytes(path, buf);
}

// ---------------------------------------------------------------------------
// SpikeTensor container
// ---------------------------------------------------------------------------
// Little-endian layout: magic "SPKT", version u16 = 1, rank u32, dims u64[rank],
// then one byte per cell (0 or 1) in row-major order.

inline std::string serialize_spikes(const Tensor& spikes) {
  std::string buf = "SPKT";
  detail::put_u16le(buf, 1);
  detail::put_u32le(buf, static_cast<std::uint32_t>(spikes.rank()));
  for (std::size_t d : spikes.shape()) detail::put_u64le(buf, d);
  for (double v : spikes.data()) {
    if (v != 0.0 && v != 1.0) {
      throw ContractError("serialize_spikes: tensor is not binary");
    }
    buf.push_back(v == 0.0 ? '\0' : '\1');
  }
  return buf;
}

inline Tensor parse_spikes(const std::string& bytes, const std::string& origin = "<memory>") {
  detail::ByteReader rd(bytes, origin);
  rd.need(10);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(rd.u8());
  if (std::string(magic, 4) != "SPKT") throw FormatError(origin + ": bad magic (expected \"SPKT\")");
  if (rd.u16le() != 1) throw FormatError(origin + ": unsupported spike-tensor version");
  const std::uint32_t rank = rd.u32le();
  Shape shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.push_back(rd.u64le());
    n *= shape.back();
  }
  if (rd.remaining() != n) {
    throw FormatError(origin + ": payload is " + std::to_string(rd.remaining()) +
                      " bytes, header promises " + std::to_string(n));
  }
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t b = rd.u8();
    if (b > 1) throw FormatError(origin + ": non-binary cell value " + std::to_string(b));
    data[i] = b;
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

inline void write_spikes(const Tensor& spikes, const std::string& path) {
  detail::write_file_bytes(path, serialize_spikes(spikes));
}

inline Tensor read_spikes(const std::string& path) {
  return parse_spikes(detail::read_file_bytes(path), path);
}

// ---------------------------------------------------------------------------
// synthetic event gestures
// ---------------------------------------------------------------------------

/// Motion archetypes for the synthetic gesture generator. The last class is a
/// static pattern, which emits no events at all (nothing ever changes).
enum class GestureClass : int {
  kSweepRight = 0,
  kSweepDown = 1,
  kRotateCw = 2,
  kExpand = 3,
  kContract = 4,
  kSweepDiagonal = 5,
  kRotateCcw = 6,
  kStatic = 7,
};

inline constexpr std::size_t kGestureClassCount = 8;

namespace detail {

struct GesturePose {
  double cx, cy;      // blob center, pixels
  double ring_r;      // ring radius; < 0 means plain blob
};

inline GesturePose gesture_pose(GestureClass cls, double progress, double w, double h,
                                double jx, double jy, double phase) {
  const double m = std::min(w, h);
  const double mid_x = w * (0.5 + 0.1 * jx);
  const double mid_y = h * (0.5 + 0.1 * jy);
  switch (cls) {
    case GestureClass::kSweepRight:
      return {w * (0.15 + 0.7 * progress), mid_y, -1.0};
    case GestureClass::kSweepDown:
      return {mid_x, h * (0.15 + 0.7 * progress), -1.0};
    case GestureClass::kRotateCw: {
      const double a = phase - 6.283185307179586 * progress;
      return {mid_x + 0.3 * m * std::cos(a), mid_y + 0.3 * m * std::sin(a), -1.0};
    }
    case GestureClass::kExpand:
      return {mid_x, mid_y, m * (0.08 + 0.34 * progress)};
    case GestureClass::kContract:
      return {mid_x, mid_y, m * (0.42 - 0.34 * progress)};
    case GestureClass::kSweepDiagonal:
      return {w * (0.15 + 0.7 * progress), h * (0.15 + 0.7 * progress), -1.0};
    case GestureClass::kRotateCcw: {
      const double a = phase + 6.283185307179586 * progress;
      return {mid_x + 0.3 * m * std::cos(a), mid_y + 0.3 * m * std::sin(a), -1.0};
    }
    case GestureClass::kStatic:
    default:
      return {mid_x, mid_y, -1.0};
  }
}

inline double gesture_intensity(const GesturePose& p, double sigma, double x, double y) {
  const double dx = x - p.cx;
  const double dy = y - p.cy;
  if (p.ring_r < 0.0) {
    return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
  }
  const double d = std::sqrt(dx * dx + dy * dy) - p.ring_r;
  return std::exp(-(d * d) / (2.0 * sigma * sigma));
}

}  // namespace detail

/// Generates a deterministic synthetic gesture recording: a moving intensity
/// pattern is sampled on a 1 kHz frame clock, and every contrast-threshold
/// crossing of a pixel against its reference level emits an ON or OFF event
/// (DVS-style). event_rate caps the expected events per second; surplus raw
/// events are thinned with the stream's own seeded RNG.
inline EventStream synth_gesture(std::size_t class_id, std::uint64_t seed,
                                 std::uint32_t duration_us, std::uint16_t width,
                                 std::uint16_t height, double event_rate) {
  if (class_id >= kGestureClassCount) {
    throw ContractError("synth_gesture: class id " + std::to_string(class_id) + " outside [0," +
                        std::to_string(kGestureClassCount) + ")");
  }
  if (event_rate <= 0.0) throw ContractError("synth_gesture: event_rate must be positive");
  if (width == 0 || height == 0 || duration_us == 0) {
    throw ContractError("synth_gesture: empty sensor or zero duration");
  }
  const auto cls = static_cast<GestureClass>(class_id);
  Rng rng(mix_seed(seed, 0x6765737475726573ull, class_id));

  const double jx = rng.uniform(-1.0, 1.0);
  const double jy = rng.uniform(-1.0, 1.0);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  const double sigma = 0.12 * std::min(width, height) * rng.uniform(0.9, 1.1);
  const double contrast = 0.2;

  const std::uint32_t frame_dt = 1000;  // us
  const std::uint32_t frames = (duration_us + frame_dt - 1) / frame_dt;

  std::vector<double> ref(static_cast<std::size_t>(width) * height);
  {
    const auto p0 = detail::gesture_pose(cls, 0.0, width, height, jx, jy, phase);
    for (std::uint16_t y = 0; y < height; ++y) {
      for (std::uint16_t x = 0; x < width; ++x) {
        ref[static_cast<std::size_t>(y) * width + x] =
            detail::gesture_intensity(p0, sigma, x + 0.5, y + 0.5);
      }
    }
  }

  std::vector<EventRecord> raw;
  for (std::uint32_t f = 1; f < frames; ++f) {
    const double progress = static_cast<double>(f) / static_cast<double>(frames - 1 ? frames - 1 : 1);
    const auto pose = detail::gesture_pose(cls, progress, width, height, jx, jy, phase);
    const std::uint32_t t0 = f * frame_dt;
    for (std::uint16_t y = 0; y < height; ++y) {
      for (std::uint16_t x = 0; x < width; ++x) {
        double& r = ref[static_cast<std::size_t>(y) * width + x];
        const double cur = detail::gesture_intensity(pose, sigma, x + 0.5, y + 0.5);
        while (cur - r >= contrast) {
          const std::uint32_t jitter = static_cast<std::uint32_t>(rng.uniform() * frame_dt);
          raw.push_back({std::min(t0 + jitter, duration_us - 1), x, y, 1});
          r += contrast;
        }
        while (r - cur >= contrast) {
          const std::uint32_t jitter = static_cast<std::uint32_t>(rng.uniform() * frame_dt);
          raw.push_back({std::min(t0 + jitter, duration_us - 1), x, y, 0});
          r -= contrast;
        }
      }
    }
  }

  // thin to the requested rate budget
  const double target = event_rate * static_cast<double>(duration_us) * 1e-6;
  EventStream out;
  out.width = width;
  out.height = height;
  out.label = static_cast<int>(class_id);
  if (!raw.empty() && static_cast<double>(raw.size()) > target) {
    const double keep = target / static_cast<double>(raw.size());
    for (const EventRecord& r : raw) {
      if (rng.uniform() < keep) out.records.push_back(r);
    }
  } else {
    out.records = std::move(raw);
  }
  std::sort(out.records.begin(), out.records.end(),
            [](const EventRecord& a, const EventRecord& b) { return a.t < b.t; });
  return out;
}

// ---------------------------------------------------------------------------
// voxelization
// ---------------------------------------------------------------------------

/// Bins a stream into a dense binary tensor [T x 2 x H x W]; channel 0 holds
/// OFF events, channel 1 ON events. A cell is 1 when at least one event of
/// that polarity fell into the bin (saturating, not counting).
/// T = min(ceil(duration / bin_width), t_max), with at least one bin so the
/// empty stream maps to an all-zero tensor.
inline Tensor events_to_frames(const EventStream& stream, std::uint32_t bin_width_us,
                               std::size_t t_max) {
  if (bin_width_us == 0) throw ContractError("events_to_frames: bin width must be positive");
  if (t_max == 0) throw ContractError("events_to_frames: t_max must be positive");
  if (stream.width == 0 || stream.height == 0) {
    throw ContractError("events_to_frames: stream has an empty sensor size");
  }
  const std::uint32_t duration = stream.duration_us();
  std::size_t T = (duration + bin_width_us - 1) / bin_width_us;
  T = std::max<std::size_t>(1, std::min(T, t_max));
  const std::size_t H = stream.height, W = stream.width;
  std::vector<double> grid(T * 2 * H * W, 0.0);
  for (const EventRecord& r : stream.records) {
    const std::size_t bin = r.t / bin_width_us;
    if (bin >= T) continue;  // truncated by t_max
    const std::size_t ch = r.polarity;
    grid[((bin * 2 + ch) * H + r.y) * W + r.x] = 1.0;
  }
  return Tensor::from_data({T, 2, H, W}, std::move(grid));
}

}  // namespace mamba_spike
