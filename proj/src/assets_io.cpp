// Copyright 2026 The MSMA Face Authors
// SPDX-License-Identifier: Apache-2.0

#include "msma/assets_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <vector>

#include <json.hpp>

#ifdef MSMA_HAVE_PNG
#include <png.h>
#endif

#include "msma/error.hpp"

namespace msma {

using nlohmann::json;

namespace {

std::string byte_at(std::size_t offset) { return "byte " + std::to_string(offset); }
std::string line_at(int line) { return "line " + std::to_string(line); }

// ---------------------------------------------------------------------------
// little-endian byte streams

class ByteWriter {
 public:
  void raw(std::string_view s) { out_.append(s); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) {
      throw ParseError(path_, byte_at(pos_), "truncated " + what + " (need " + std::to_string(n) +
                                                 " bytes, " + std::to_string(remaining()) +
                                                 " left)");
    }
  }
  std::string_view raw(std::size_t n, const std::string& what) {
    need(n, what);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const std::string& what) {
    return static_cast<std::uint8_t>(raw(1, what)[0]);
  }
  std::uint32_t u32(const std::string& what) {
    const std::string_view s = raw(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[i])) << (8 * i);
    return v;
  }
  std::int32_t i32(const std::string& what) { return static_cast<std::int32_t>(u32(what)); }
  double f64(const std::string& what) {
    const std::string_view s = raw(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(s[i])) << (8 * i);
    return std::bit_cast<double>(v);
  }
  /// Reads `count` doubles after checking that they are all present.
  std::vector<double> f64s(std::uint64_t count, const std::string& what) {
    if (count > remaining() / 8) need(std::numeric_limits<std::size_t>::max(), what);
    std::vector<double> out(count);
    for (double& v : out) v = f64(what);
    return out;
  }
  [[noreturn]] void fail(const std::string& message) const {
    throw ParseError(path_, byte_at(pos_), message);
  }

 private:
  std::string_view bytes_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// text helpers

struct Line {
  int number;
  std::string_view text;
};

std::vector<Line> split_lines(std::string_view text) {
  std::vector<Line> lines;
  int number = 1;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (end < text.size() || !line.empty()) lines.push_back({number, line});
    ++number;
    start = end + 1;
  }
  return lines;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f'; }

std::vector<std::string_view> tokenize(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    const std::size_t start = i;
    while (i < line.size() && !is_space(line[i])) ++i;
    if (i > start) tokens.push_back(line.substr(start, i - start));
  }
  return tokens;
}

bool parse_finite(std::string_view token, double& out) {
  if (!token.empty() && token.front() == '+') token.remove_prefix(1);
  const char* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool parse_int(std::string_view token, long long& out) {
  if (!token.empty() && token.front() == '+') token.remove_prefix(1);
  const char* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::string quote_text(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (static_cast<unsigned char>(c) < 0x20 || static_cast<unsigned char>(c) >= 0x7f) {
      out += '?';
    } else {
      out += c;
    }
    if (out.size() > 40) {
      out += "...";
      break;
    }
  }
  return out + "\"";
}

// ---------------------------------------------------------------------------
// netpbm headers

struct PnmHeader {
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(std::string_view bytes, const std::string& path,
                           std::string_view magic, int max_maxval) {
  if (bytes.size() < 2 || bytes.substr(0, 2) != magic) {
    throw ParseError(path, byte_at(0), "expected magic " + std::string(magic));
  }
  std::size_t pos = 2;
  auto next_field = [&](const char* name, long long limit) -> int {
    // Whitespace and '#' comments separate header fields.
    for (;;) {
      while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    if (pos >= bytes.size()) throw ParseError(path, byte_at(pos), std::string("truncated header, missing ") + name);
    long long value = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      value = value * 10 + (bytes[pos] - '0');
      if (value > limit) throw ParseError(path, byte_at(start), std::string(name) + " too large");
      ++pos;
    }
    if (pos == start) throw ParseError(path, byte_at(start), std::string("expected ") + name);
    if (value < 1) throw ParseError(path, byte_at(start), std::string(name) + " must be positive");
    return static_cast<int>(value);
  };
  PnmHeader h;
  h.width = next_field("width", 1 << 16);
  h.height = next_field("height", 1 << 16);
  h.maxval = next_field("maxval", max_maxval);
  if (pos >= bytes.size() || !is_space(bytes[pos])) {
    throw ParseError(path, byte_at(pos), "expected single whitespace after maxval");
  }
  h.data_offset = pos + 1;
  return h;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  if (s.size() < suffix.size()) return false;
  std::string tail(s.substr(s.size() - suffix.size()));
  std::transform(tail.begin(), tail.end(), tail.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return tail == suffix;
}

std::uint8_t quantize8(double v) {
  const double c = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

#ifdef MSMA_HAVE_PNG
Image decode_png(std::string_view bytes, const std::string& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw ParseError(path, byte_at(0), std::string("invalid PNG: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string message = img.message;
    png_image_free(&img);
    throw ParseError(path, byte_at(0), "invalid PNG: " + message);
  }
  Image out(static_cast<int>(img.height), static_cast<int>(img.width));
  for (std::size_t i = 0; i < buf.size(); ++i) out.data()[i] = buf[i] / 255.0;
  return out;
}

std::string encode_png(const Image& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(image.data().size());
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = quantize8(image.data()[i]);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encoding failed: ") + img.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encoding failed: ") + img.message);
  }
  out.resize(size);
  return out;
}
#endif

bool has_png_signature(std::string_view bytes) {
  static constexpr char kSig[] = "\x89PNG\r\n\x1a\n";
  return bytes.size() >= 8 && bytes.substr(0, 8) == std::string_view(kSig, 8);
}

// ---------------------------------------------------------------------------
// JSON helpers

json parse_json(std::string_view text, const std::string& path) {
  try {
    return json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    std::string message = e.what();
    // Drop nlohmann's "[json.exception.parse_error.101] parse error at ..."
    // prefix; the location is reported separately.
    if (const auto colon = message.find(": "); colon != std::string::npos) {
      message = message.substr(colon + 2);
    }
    throw ParseError(path, byte_at(e.byte > 0 ? e.byte - 1 : 0), "invalid JSON: " + message);
  }
}

using KeyHandler = std::function<void(const json&, const std::string&)>;

void read_object(const json& j, const std::string& pointer, const std::string& path,
                 const std::map<std::string, KeyHandler>& handlers) {
  if (!j.is_object()) {
    throw ParseError(path, pointer.empty() ? "/" : pointer, "expected a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    const std::string where = pointer + "/" + key;
    const auto it = handlers.find(key);
    if (it == handlers.end()) {
      throw ParseError(path, where, "unknown key " + quote_text(key));
    }
    it->second(value, where);
  }
}

KeyHandler real(double& dst, const std::string& path) {
  return [&dst, &path](const json& v, const std::string& where) {
    if (!v.is_number()) throw ParseError(path, where, "expected a number");
    dst = v.get<double>();
  };
}

KeyHandler integer(int& dst, const std::string& path) {
  return [&dst, &path](const json& v, const std::string& where) {
    if (!v.is_number_integer()) throw ParseError(path, where, "expected an integer");
    const auto x = v.get<long long>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
      throw ParseError(path, where, "integer out of range");
    }
    dst = static_cast<int>(x);
  };
}

std::vector<double> number_array(const json& v, const std::string& where, const std::string& path) {
  if (!v.is_array()) throw ParseError(path, where, "expected an array of numbers");
  std::vector<double> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) {
      throw ParseError(path, where + "/" + std::to_string(i), "expected a number");
    }
    out.push_back(v[i].get<double>());
  }
  return out;
}

json number_array_json(const double* data, Eigen::Index n, const char* what) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) {
      throw ParameterError(std::string("cannot serialise non-finite ") + what + " value");
    }
    arr.push_back(data[i]);
  }
  return arr;
}

}  // namespace

// ---------------------------------------------------------------------------
// files

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError(path + ": read failed");
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError(path + ": write failed");
}

std::string format_double(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

// ---------------------------------------------------------------------------
// images

Image decode_ppm(std::string_view bytes, const std::string& path) {
  const PnmHeader h = parse_pnm_header(bytes, path, "P6", 255);
  const std::size_t count = static_cast<std::size_t>(h.width) * h.height * 3;
  if (bytes.size() - h.data_offset < count) {
    throw ParseError(path, byte_at(bytes.size()),
                     "truncated pixel data (expected " + std::to_string(count) + " bytes, found " +
                         std::to_string(bytes.size() - h.data_offset) + ")");
  }
  if (bytes.size() - h.data_offset > count) {
    throw ParseError(path, byte_at(h.data_offset + count), "trailing bytes after pixel data");
  }
  Image image(h.height, h.width);
  for (std::size_t i = 0; i < count; ++i) {
    const int v = static_cast<std::uint8_t>(bytes[h.data_offset + i]);
    if (v > h.maxval) {
      throw ParseError(path, byte_at(h.data_offset + i),
                       "sample " + std::to_string(v) + " exceeds maxval " + std::to_string(h.maxval));
    }
    image.data()[i] = static_cast<double>(v) / h.maxval;
  }
  return image;
}

std::string encode_ppm(const Image& image) {
  if (image.empty()) throw ParameterError("encode_ppm: empty image");
  std::string out = "P6\n" + std::to_string(image.width()) + " " +
                    std::to_string(image.height()) + "\n255\n";
  out.reserve(out.size() + image.data().size());
  for (double v : image.data()) out.push_back(static_cast<char>(quantize8(v)));
  return out;
}

bool png_supported() {
#ifdef MSMA_HAVE_PNG
  return true;
#else
  return false;
#endif
}

Image read_image(const std::string& path) {
  const std::string bytes = read_file(path);
  if (has_png_signature(bytes)) {
#ifdef MSMA_HAVE_PNG
    return decode_png(bytes, path);
#else
    throw ParseError(path, byte_at(0), "PNG input requires a build with MSMA_ENABLE_PNG");
#endif
  }
  return decode_ppm(bytes, path);
}

void write_image(const Image& image, const std::string& path) {
  if (ends_with(path, ".png")) {
#ifdef MSMA_HAVE_PNG
    write_file(path, encode_png(image));
    return;
#else
    throw IoError(path + ": PNG output requires a build with MSMA_ENABLE_PNG");
#endif
  }
  write_file(path, encode_ppm(image));
}

// ---------------------------------------------------------------------------
// masks

SkinMask decode_pgm_mask(std::string_view bytes, const std::string& path) {
  const PnmHeader h = parse_pnm_header(bytes, path, "P5", 65535);
  const int sample_bytes = h.maxval > 255 ? 2 : 1;
  const std::size_t count = static_cast<std::size_t>(h.width) * h.height;
  if ((bytes.size() - h.data_offset) / sample_bytes < count) {
    throw ParseError(path, byte_at(bytes.size()),
                     "truncated mask data (expected " + std::to_string(count * sample_bytes) +
                         " bytes, found " + std::to_string(bytes.size() - h.data_offset) + ")");
  }
  if (bytes.size() - h.data_offset > count * sample_bytes) {
    throw ParseError(path, byte_at(h.data_offset + count * sample_bytes), "trailing bytes after mask data");
  }
  SkinMask mask(h.height, h.width);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t at = h.data_offset + i * sample_bytes;
    int v = static_cast<std::uint8_t>(bytes[at]);
    if (sample_bytes == 2) v = (v << 8) | static_cast<std::uint8_t>(bytes[at + 1]);
    if (v > h.maxval) {
      throw ParseError(path, byte_at(at),
                       "sample " + std::to_string(v) + " exceeds maxval " + std::to_string(h.maxval));
    }
    mask.data()[i] = static_cast<double>(v) / h.maxval;
  }
  return mask;
}

std::string encode_pgm_mask(const SkinMask& mask) {
  if (mask.data().empty()) throw ParameterError("encode_pgm_mask: empty mask");
  mask.validate();
  std::string out = "P5\n" + std::to_string(mask.width()) + " " +
                    std::to_string(mask.height()) + "\n65535\n";
  for (double v : mask.data()) {
    const auto s = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    out.push_back(static_cast<char>(s >> 8));
    out.push_back(static_cast<char>(s & 0xff));
  }
  return out;
}

SkinMask read_mask(const std::string& path) { return decode_pgm_mask(read_file(path), path); }

void write_mask(const SkinMask& mask, const std::string& path) {
  write_file(path, encode_pgm_mask(mask));
}

void check_mask_matches(const SkinMask& mask, const Image& image, const std::string& mask_path) {
  if (mask.height() != image.height() || mask.width() != image.width()) {
    throw ParseError(mask_path, "header",
                     "mask is " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                         " but the image is " + std::to_string(image.width()) + "x" +
                         std::to_string(image.height()));
  }
}

// ---------------------------------------------------------------------------
// OBJ

Mesh parse_obj(std::string_view text, const std::string& path) {
  std::vector<Eigen::Vector3d> vertices;
  struct FaceRef {
    long long index;  // zero-based, not yet range-checked against the final count
    int line;
  };
  std::vector<std::array<FaceRef, 3>> faces;

  for (const Line& line : split_lines(text)) {
    std::string_view body = line.text;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    const auto tokens = tokenize(body);
    if (tokens.empty()) continue;
    const std::string_view kw = tokens[0];
    if (kw == "v") {
      if (tokens.size() < 4) {
        throw ParseError(path, line_at(line.number), "vertex needs three coordinates");
      }
      Eigen::Vector3d p;
      for (std::size_t k = 1; k < tokens.size(); ++k) {
        double x = 0.0;
        if (!parse_finite(tokens[k], x)) {
          throw ParseError(path, line_at(line.number), "invalid vertex coordinate " + quote_text(tokens[k]));
        }
        if (k <= 3) p[static_cast<int>(k) - 1] = x;
      }
      vertices.push_back(p);
    } else if (kw == "f") {
      if (tokens.size() < 4) {
        throw ParseError(path, line_at(line.number), "face needs at least three vertices");
      }
      std::vector<FaceRef> refs;
      for (std::size_t k = 1; k < tokens.size(); ++k) {
        const std::string_view ref = tokens[k].substr(0, tokens[k].find('/'));
        long long idx = 0;
        if (!parse_int(ref, idx)) {
          throw ParseError(path, line_at(line.number), "invalid face index " + quote_text(tokens[k]));
        }
        if (idx == 0) {
          throw ParseError(path, line_at(line.number), "face index 0 (OBJ indices are 1-based)");
        }
        const long long resolved = idx > 0 ? idx - 1 : static_cast<long long>(vertices.size()) + idx;
        if (resolved < 0) {
          throw ParseError(path, line_at(line.number),
                           "relative face index " + std::to_string(idx) + " precedes the first vertex");
        }
        refs.push_back({resolved, line.number});
      }
      for (std::size_t k = 1; k + 1 < refs.size(); ++k) faces.push_back({refs[0], refs[k], refs[k + 1]});
    }
  }

  Mesh mesh;
  mesh.vertices.resize(static_cast<Eigen::Index>(vertices.size()), 3);
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    mesh.vertices.row(static_cast<Eigen::Index>(i)) = vertices[i].transpose();
  }
  mesh.triangles.reserve(faces.size());
  for (const auto& f : faces) {
    Triangle t;
    for (int k = 0; k < 3; ++k) {
      if (f[k].index >= static_cast<long long>(vertices.size())) {
        throw ParseError(path, line_at(f[k].line),
                         "face index " + std::to_string(f[k].index + 1) + " out of range (" +
                             std::to_string(vertices.size()) + " vertices)");
      }
      t[k] = static_cast<int>(f[k].index);
    }
    mesh.triangles.push_back(t);
  }
  if (vertices.empty()) throw ParseError(path, "end of file", "no vertex records");
  return mesh;
}

std::string format_obj(const Mesh& mesh) {
  mesh.validate();
  std::string out;
  out.reserve(static_cast<std::size_t>(mesh.num_vertices()) * 48 + mesh.triangles.size() * 24);
  for (int i = 0; i < mesh.num_vertices(); ++i) {
    out += "v";
    for (int a = 0; a < 3; ++a) {
      const double x = mesh.vertices(i, a);
      if (!std::isfinite(x)) throw ParameterError("format_obj: non-finite vertex coordinate");
      out += ' ';
      out += format_double(x);
    }
    out += '\n';
  }
  for (const Triangle& t : mesh.triangles) {
    out += "f " + std::to_string(t[0] + 1) + " " + std::to_string(t[1] + 1) + " " +
           std::to_string(t[2] + 1) + "\n";
  }
  return out;
}

Mesh read_obj(const std::string& path) { return parse_obj(read_file(path), path); }

void write_obj(const Mesh& mesh, const std::string& path) { write_file(path, format_obj(mesh)); }

// ---------------------------------------------------------------------------
// landmarks

Points2 parse_landmarks(std::string_view text, const std::string& path) {
  std::vector<Eigen::Vector2d> rows;
  int last_line = 0;
  int extra_line = 0;
  for (const Line& line : split_lines(text)) {
    last_line = line.number;
    const auto tokens = tokenize(line.text);
    if (tokens.empty()) continue;
    if (tokens.size() != 2) {
      throw ParseError(path, line_at(line.number),
                       "expected two numbers \"x y\", found " + std::to_string(tokens.size()) + " fields");
    }
    Eigen::Vector2d p;
    for (int k = 0; k < 2; ++k) {
      if (!parse_finite(tokens[k], p[k])) {
        throw ParseError(path, line_at(line.number), "invalid coordinate " + quote_text(tokens[k]));
      }
    }
    if (static_cast<int>(rows.size()) == kNumLandmarks && extra_line == 0) extra_line = line.number;
    rows.push_back(p);
  }
  if (static_cast<int>(rows.size()) != kNumLandmarks) {
    const int at = extra_line > 0 ? extra_line : last_line + 1;
    throw ParseError(path, line_at(at),
                     "expected 68 landmarks, found " + std::to_string(rows.size()));
  }
  Points2 out(kNumLandmarks, 2);
  for (int i = 0; i < kNumLandmarks; ++i) out.row(i) = rows[i].transpose();
  return out;
}

std::string format_landmarks(const Points2& landmarks) {
  if (landmarks.rows() != kNumLandmarks) {
    throw ShapeError("format_landmarks: expected 68 rows, found " + std::to_string(landmarks.rows()));
  }
  std::string out;
  for (int i = 0; i < kNumLandmarks; ++i) {
    if (!landmarks.row(i).allFinite()) throw ParameterError("format_landmarks: non-finite coordinate");
    out += format_double(landmarks(i, 0)) + " " + format_double(landmarks(i, 1)) + "\n";
  }
  return out;
}

Points2 read_landmarks(const std::string& path) { return parse_landmarks(read_file(path), path); }

void write_landmarks(const Points2& landmarks, const std::string& path) {
  write_file(path, format_landmarks(landmarks));
}

// ---------------------------------------------------------------------------
// configuration

FitConfig parse_config(std::string_view text, const std::string& path) {
  const json j = parse_json(text, path);
  FitConfig c;
  LossWeights& w = c.loss_weights;
  LearningRateScales& s = c.lr_scales;

  const std::map<std::string, KeyHandler> weight_keys = {
      {"lambda_pho", real(w.lambda_pho, path)},
      {"lambda_per", real(w.lambda_per, path)},
      {"lambda_lmk", real(w.lambda_lmk, path)},
      {"lambda_3dmm", real(w.lambda_3dmm, path)},
      {"lambda_refl", real(w.lambda_refl, path)},
      {"lambda_alpha", real(w.lambda_alpha, path)},
      {"lambda_beta", real(w.lambda_beta, path)},
      {"lambda_gamma", real(w.lambda_gamma, path)},
      {"landmark_weights",
       [&](const json& v, const std::string& where) {
         const auto values = number_array(v, where, path);
         if (values.size() != w.landmark_weights.size()) {
           throw ParseError(path, where,
                            "expected 68 landmark weights, found " + std::to_string(values.size()));
         }
         std::copy(values.begin(), values.end(), w.landmark_weights.begin());
       }},
  };
  const std::map<std::string, KeyHandler> scale_keys = {
      {"alpha", real(s.alpha, path)},       {"beta", real(s.beta, path)},
      {"gamma", real(s.gamma, path)},       {"rotation", real(s.rotation, path)},
      {"translation", real(s.translation, path)}, {"delta", real(s.delta, path)},
  };
  const std::map<std::string, KeyHandler> top_keys = {
      {"max_iterations", integer(c.max_iterations, path)},
      {"learning_rate", real(c.learning_rate, path)},
      {"lr_decay_factor", real(c.lr_decay_factor, path)},
      {"lr_decay_interval", integer(c.lr_decay_interval, path)},
      {"convergence_tolerance", real(c.convergence_tolerance, path)},
      {"beta1", real(c.beta1, path)},
      {"beta2", real(c.beta2, path)},
      {"epsilon", real(c.epsilon, path)},
      {"seed",
       [&](const json& v, const std::string& where) {
         if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
           throw ParseError(path, where, "expected a non-negative integer");
         }
         c.seed = v.get<std::uint64_t>();
       }},
      {"loss_weights",
       [&](const json& v, const std::string& where) { read_object(v, where, path, weight_keys); }},
      {"lr_scales",
       [&](const json& v, const std::string& where) { read_object(v, where, path, scale_keys); }},
  };
  read_object(j, "", path, top_keys);
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw ParseError(path, "/", e.what());
  }
  return c;
}

std::string format_config(const FitConfig& c) {
  const LossWeights& w = c.loss_weights;
  const LearningRateScales& s = c.lr_scales;
  json j;
  j["max_iterations"] = c.max_iterations;
  j["learning_rate"] = c.learning_rate;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["lr_decay_interval"] = c.lr_decay_interval;
  j["convergence_tolerance"] = c.convergence_tolerance;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["epsilon"] = c.epsilon;
  j["seed"] = c.seed;
  j["loss_weights"] = {
      {"lambda_pho", w.lambda_pho},       {"lambda_per", w.lambda_per},
      {"lambda_lmk", w.lambda_lmk},       {"lambda_3dmm", w.lambda_3dmm},
      {"lambda_refl", w.lambda_refl},     {"lambda_alpha", w.lambda_alpha},
      {"lambda_beta", w.lambda_beta},     {"lambda_gamma", w.lambda_gamma},
      {"landmark_weights", w.landmark_weights},
  };
  j["lr_scales"] = {{"alpha", s.alpha},       {"beta", s.beta},
                    {"gamma", s.gamma},       {"rotation", s.rotation},
                    {"translation", s.translation}, {"delta", s.delta}};
  return j.dump(2) + "\n";
}

FitConfig read_config(const std::string& path) { return parse_config(read_file(path), path); }

void write_config(const FitConfig& config, const std::string& path) {
  write_file(path, format_config(config));
}

// ---------------------------------------------------------------------------
// coefficients

FaceCoefficients parse_coefficients(std::string_view text, const std::string& path) {
  const json j = parse_json(text, path);
  std::map<std::string, std::vector<double>> arrays;
  std::map<std::string, KeyHandler> handlers;
  for (const char* key : {"alpha", "beta", "gamma", "rotation", "translation", "delta"}) {
    handlers[key] = [&arrays, &path, key](const json& v, const std::string& where) {
      arrays[key] = number_array(v, where, path);
    };
  }
  read_object(j, "", path, handlers);
  for (const char* key : {"alpha", "beta", "gamma", "rotation", "translation", "delta"}) {
    if (!arrays.count(key)) throw ParseError(path, "/", std::string("missing key \"") + key + "\"");
  }
  auto fixed = [&](const char* key, std::size_t n) {
    if (arrays[key].size() != n) {
      throw ParseError(path, std::string("/") + key,
                       "expected " + std::to_string(n) + " values, found " +
                           std::to_string(arrays[key].size()));
    }
  };
  fixed("rotation", 3);
  fixed("translation", 3);
  fixed("delta", 9);
  auto vec = [&](const char* key) {
    const auto& v = arrays[key];
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  FaceCoefficients c;
  c.alpha = vec("alpha");
  c.beta = vec("beta");
  c.gamma = vec("gamma");
  c.rotation = vec("rotation");
  c.translation = vec("translation");
  c.delta = vec("delta");
  return c;
}

std::string format_coefficients(const FaceCoefficients& c) {
  json j;
  j["alpha"] = number_array_json(c.alpha.data(), c.alpha.size(), "alpha");
  j["beta"] = number_array_json(c.beta.data(), c.beta.size(), "beta");
  j["gamma"] = number_array_json(c.gamma.data(), c.gamma.size(), "gamma");
  j["rotation"] = number_array_json(c.rotation.data(), 3, "rotation");
  j["translation"] = number_array_json(c.translation.data(), 3, "translation");
  j["delta"] = number_array_json(c.delta.data(), 9, "delta");
  return j.dump(2) + "\n";
}

FaceCoefficients read_coefficients(const std::string& path) {
  return parse_coefficients(read_file(path), path);
}

void write_coefficients(const FaceCoefficients& coefficients, const std::string& path) {
  write_file(path, format_coefficients(coefficients));
}

// ---------------------------------------------------------------------------
// basis

namespace {
constexpr std::string_view kBasisMagic = "MFB1";
constexpr std::uint32_t kMaxCount = 1u << 24;
}  // namespace

FaceBasis decode_basis(std::string_view bytes, const std::string& path) {
  ByteReader r(bytes, path);
  if (r.raw(4 <= bytes.size() ? 4 : bytes.size(), "magic") != kBasisMagic) {
    throw ParseError(path, byte_at(0), "expected magic \"MFB1\"");
  }
  auto count = [&](const char* what) {
    const std::size_t at = r.position();
    const std::uint32_t v = r.u32(what);
    if (v > kMaxCount) throw ParseError(path, byte_at(at), std::string(what) + " too large");
    return v;
  };
  const std::uint32_t V = count("vertex count");
  const std::uint32_t n_id = count("identity dimension");
  const std::uint32_t n_exp = count("expression dimension");
  const std::uint32_t n_tex = count("texture dimension");
  const std::uint32_t n_tri = count("triangle count");
  const std::uint32_t n_lmk = count("landmark count");
  const std::uint64_t rows = 3ull * V;

  auto vector = [&](const char* what) {
    const auto v = r.f64s(rows, what);
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(rows)));
  };
  auto matrix = [&](std::uint32_t cols, const char* what) {
    const auto v = r.f64s(rows * cols, what);
    return Eigen::MatrixXd(Eigen::Map<const Eigen::MatrixXd>(v.data(), static_cast<Eigen::Index>(rows), cols));
  };
  FaceBasis b;
  b.mean_shape = vector("mean shape");
  b.mean_texture = vector("mean texture");
  b.id = matrix(n_id, "identity basis");
  b.exp = matrix(n_exp, "expression basis");
  b.tex = matrix(n_tex, "texture basis");
  r.need(12ull * n_tri, "triangles");
  b.triangles.resize(n_tri);
  for (Triangle& t : b.triangles) {
    for (int& k : t) k = r.i32("triangles");
  }
  r.need(4ull * n_lmk, "landmarks");
  b.landmarks.resize(n_lmk);
  for (int& l : b.landmarks) l = r.i32("landmarks");
  const std::string_view skin = r.raw(V, "skin flags");
  b.skin.assign(skin.begin(), skin.end());
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
  for (std::uint8_t& s : b.skin) {
    if (s > 1) throw ParseError(path, "skin flags", "skin flags must be 0 or 1");
  }
  if (!b.mean_shape.allFinite() || !b.mean_texture.allFinite() || !b.id.allFinite() ||
      !b.exp.allFinite() || !b.tex.allFinite()) {
    throw ParseError(path, "content", "non-finite basis value");
  }
  try {
    b.validate();
  } catch (const ShapeError& e) {
    throw ParseError(path, "content", e.what());
  }
  return b;
}

std::string encode_basis(const FaceBasis& b) {
  b.validate();
  ByteWriter w;
  w.raw(kBasisMagic);
  w.u32(static_cast<std::uint32_t>(b.num_vertices()));
  w.u32(static_cast<std::uint32_t>(b.id.cols()));
  w.u32(static_cast<std::uint32_t>(b.exp.cols()));
  w.u32(static_cast<std::uint32_t>(b.tex.cols()));
  w.u32(static_cast<std::uint32_t>(b.triangles.size()));
  w.u32(static_cast<std::uint32_t>(b.landmarks.size()));
  for (double v : b.mean_shape) w.f64(v);
  for (double v : b.mean_texture) w.f64(v);
  for (const Eigen::MatrixXd* m : {&b.id, &b.exp, &b.tex}) {
    for (Eigen::Index k = 0; k < m->size(); ++k) w.f64(m->data()[k]);
  }
  for (const Triangle& t : b.triangles) {
    for (int k : t) w.i32(k);
  }
  for (int l : b.landmarks) w.i32(l);
  for (std::uint8_t s : b.skin) w.u8(s);
  return w.take();
}

FaceBasis read_basis(const std::string& path) { return decode_basis(read_file(path), path); }

void write_basis(const FaceBasis& basis, const std::string& path) {
  write_file(path, encode_basis(basis));
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {
constexpr std::string_view kCheckpointMagic = "MSMA";
}  // namespace

std::string encode_checkpoint(const NetworkParams& params) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u8(kCheckpointVersion);
  std::uint32_t count = 0;
  for_each_parameter(params, [&](const std::string&, const Tensor4&) { ++count; });
  w.u32(count);
  for_each_parameter(params, [&](const std::string& name, const Tensor4& t) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    for (int d : {t.n(), t.c(), t.h(), t.w()}) w.i32(d);
    for (double v : t.values()) w.f64(v);
  });
  return w.take();
}

void decode_checkpoint(std::string_view bytes, NetworkParams& params, const std::string& path) {
  ByteReader r(bytes, path);
  if (r.raw(4 <= bytes.size() ? 4 : bytes.size(), "magic") != kCheckpointMagic) {
    throw ParseError(path, byte_at(0), "expected magic \"MSMA\"");
  }
  const std::uint8_t version = r.u8("version");
  if (version != kCheckpointVersion) {
    throw ParseError(path, byte_at(4), "unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<std::pair<std::string, Tensor4*>> expected;
  for_each_parameter(params, [&](const std::string& name, Tensor4& t) { expected.emplace_back(name, &t); });
  const std::size_t count_at = r.position();
  const std::uint32_t count = r.u32("block count");
  if (count != expected.size()) {
    throw ParseError(path, byte_at(count_at),
                     "expected " + std::to_string(expected.size()) + " parameter blocks, found " +
                         std::to_string(count));
  }
  std::vector<std::vector<double>> values;
  values.reserve(count);
  for (const auto& [name, tensor] : expected) {
    const std::size_t block_at = r.position();
    const std::uint32_t len = r.u32("name length");
    if (len > 4096) throw ParseError(path, byte_at(block_at), "parameter name too long");
    const std::string got(r.raw(len, "parameter name"));
    if (got != name) {
      throw ParseError(path, byte_at(block_at),
                       "expected parameter " + quote_text(name) + ", found " + quote_text(got));
    }
    const std::size_t dims_at = r.position();
    Shape4 shape;
    shape.n = r.i32("dims");
    shape.c = r.i32("dims");
    shape.h = r.i32("dims");
    shape.w = r.i32("dims");
    if (!(shape == tensor->shape())) {
      throw ParseError(path, byte_at(dims_at),
                       "parameter " + quote_text(name) + " has shape " + shape.str() + ", expected " +
                           tensor->shape().str());
    }
    values.push_back(r.f64s(shape.count(), "parameter " + name));
  }
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    auto dst = expected[i].second->values();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

void write_checkpoint(const NetworkParams& params, const std::string& path) {
  write_file(path, encode_checkpoint(params));
}

void read_checkpoint(const std::string& path, NetworkParams& params) {
  decode_checkpoint(read_file(path), params, path);
}

// ---------------------------------------------------------------------------
// trace

std::string format_trace_csv(const FitTrace& trace) {
  std::string out = "iteration,total,pho,per,lmk,3dmm,refl,gradient_norm,learning_rate\n";
  for (const FitRecord& rec : trace.records) {
    out += std::to_string(rec.iteration) + "," + format_double(rec.total);
    for (const char* name : {"pho", "per", "lmk", "3dmm", "refl"}) {
      double v = 0.0;
      for (const LossTerm& t : rec.breakdown.terms) {
        if (t.name == name) v = t.weighted;
      }
      out += "," + format_double(v);
    }
    out += "," + format_double(rec.gradient_norm) + "," + format_double(rec.learning_rate) + "\n";
  }
  return out;
}

void write_trace_csv(const FitTrace& trace, const std::string& path) {
  write_file(path, format_trace_csv(trace));
}

}  // namespace msma
