#include "pncnn/io.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "pncnn/error.hpp"

namespace pncnn {

static_assert(std::endian::native == std::endian::little, "byte order assumed little-endian");

void atomic_write_bytes(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void atomic_write_text(const fs::path& path, const std::string& text) {
  atomic_write_bytes(path, text);
}

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

constexpr char kGridMagic[] = "CGRD1";
constexpr std::size_t kGridMagicLen = 5;
constexpr std::size_t kGridHeader = kGridMagicLen + 1 + 4 + 4;

void put_u32(std::string& s, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  s.append(b, 4);
}

std::uint32_t get_u32(const std::string& s, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, s.data() + at, 4);
  return v;
}

}  // namespace

std::size_t dtype_size(GridDType t) {
  switch (t) {
    case GridDType::F32: return 4;
    case GridDType::F64: return 8;
    case GridDType::U16: return 2;
  }
  throw FormatError("unknown grid dtype");
}

std::string encode_grid(const Grid& g, GridDType dtype) {
  std::string s(kGridMagic, kGridMagicLen);
  s.push_back(static_cast<char>(dtype));
  put_u32(s, static_cast<std::uint32_t>(g.rows));
  put_u32(s, static_cast<std::uint32_t>(g.cols));
  s.reserve(s.size() + g.size() * dtype_size(dtype));
  for (double v : g.data) {
    switch (dtype) {
      case GridDType::F64: {
        char b[8];
        std::memcpy(b, &v, 8);
        s.append(b, 8);
        break;
      }
      case GridDType::F32: {
        const float f = static_cast<float>(v);
        char b[4];
        std::memcpy(b, &f, 4);
        s.append(b, 4);
        break;
      }
      case GridDType::U16: {
        if (!(v >= 0.0 && v <= 65535.0) || v != std::floor(v)) {
          throw DomainError("grid value " + std::to_string(v) + " not representable as u16");
        }
        const auto u = static_cast<std::uint16_t>(v);
        char b[2];
        std::memcpy(b, &u, 2);
        s.append(b, 2);
        break;
      }
    }
  }
  return s;
}

Grid decode_grid(const std::string& bytes, std::size_t& offset, GridDType* dtype_out) {
  if (bytes.size() < offset + kGridHeader ||
      bytes.compare(offset, kGridMagicLen, kGridMagic) != 0) {
    throw FormatError("not a CGRD1 grid (bad magic or truncated header)");
  }
  const auto code = static_cast<std::uint8_t>(bytes[offset + kGridMagicLen]);
  if (code > 2) throw FormatError("CGRD1: unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<GridDType>(code);
  const std::size_t rows = get_u32(bytes, offset + kGridMagicLen + 1);
  const std::size_t cols = get_u32(bytes, offset + kGridMagicLen + 5);
  const std::size_t payload = rows * cols * dtype_size(dtype);
  std::size_t at = offset + kGridHeader;
  if (bytes.size() < at + payload) throw FormatError("CGRD1: truncated payload");
  Grid g(rows, cols);
  for (std::size_t i = 0; i < g.size(); ++i) {
    switch (dtype) {
      case GridDType::F64: std::memcpy(&g.data[i], bytes.data() + at, 8); at += 8; break;
      case GridDType::F32: {
        float f;
        std::memcpy(&f, bytes.data() + at, 4);
        g.data[i] = f;
        at += 4;
        break;
      }
      case GridDType::U16: {
        std::uint16_t u;
        std::memcpy(&u, bytes.data() + at, 2);
        g.data[i] = u;
        at += 2;
        break;
      }
    }
  }
  offset = at;
  if (dtype_out) *dtype_out = dtype;
  return g;
}

void write_grid_file(const fs::path& path, const Grid& g, GridDType dtype) {
  atomic_write_bytes(path, encode_grid(g, dtype));
}

Grid read_grid_file(const fs::path& path, GridDType* dtype) {
  const auto bytes = read_file_bytes(path);
  std::size_t offset = 0;
  Grid g = decode_grid(bytes, offset, dtype);
  if (offset != bytes.size()) throw FormatError("CGRD1: trailing bytes in '" + path.string() + "'");
  return g;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* out = static_cast<std::string*>(png_get_error_ptr(png));
  if (out) *out = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

U16Image read_png_u16(const fs::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("cannot open '" + path.string() + "'");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError("'" + path.string() + "' is not a PNG file");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialization failed");
  }
  U16Image img;
  volatile bool bad_format = false;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("PNG decode error in '" + path.string() + "': " + err);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth != 16 || color != PNG_COLOR_TYPE_GRAY) {
    bad_format = true;
  } else {
    img.rows = png_get_image_height(png, info);
    img.cols = png_get_image_width(png, info);
    png_set_swap(png);
    img.pixels.resize(img.rows * img.cols);
    std::vector<png_bytep> rows(img.rows);
    for (std::size_t r = 0; r < img.rows; ++r) {
      rows[r] = reinterpret_cast<png_bytep>(img.pixels.data() + r * img.cols);
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (bad_format) {
    throw FormatError("'" + path.string() + "': expected 16-bit single-channel PNG (bit depth " +
                      std::to_string(bit_depth) + ", color type " + std::to_string(color) + ")");
  }
  return img;
}

void write_png_u16(const fs::path& path, const U16Image& img) {
  if (img.pixels.size() != img.rows * img.cols) throw ShapeError("write_png_u16: size mismatch");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    FilePtr fp(std::fopen(tmp.c_str(), "wb"));
    if (!fp) throw Error("cannot open '" + tmp.string() + "' for writing");
    std::string err;
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      throw Error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw Error("PNG encode error for '" + path.string() + "': " + err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.cols), static_cast<png_uint_32>(img.rows),
                 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_set_swap(png);
    std::vector<png_bytep> rows(img.rows);
    for (std::size_t r = 0; r < img.rows; ++r) {
      rows[r] = reinterpret_cast<png_bytep>(const_cast<std::uint16_t*>(img.pixels.data() + r * img.cols));
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  fs::rename(tmp, path);
}

U16Image depth_to_u16(const Grid& depth_m) {
  U16Image img{depth_m.rows, depth_m.cols, std::vector<std::uint16_t>(depth_m.size())};
  for (std::size_t i = 0; i < depth_m.size(); ++i) {
    const double stored = std::round(depth_m.data[i] * 256.0);
    if (!(stored >= 0.0) || stored > 65535.0) {
      throw DomainError("depth " + std::to_string(depth_m.data[i]) +
                        " m outside the 16-bit PNG range");
    }
    img.pixels[i] = static_cast<std::uint16_t>(stored);
  }
  return img;
}

Grid u16_to_depth(const U16Image& img) {
  Grid g(img.rows, img.cols);
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = img.pixels[i] / 256.0;
  return g;
}

Grid read_depth_png(const fs::path& path) { return u16_to_depth(read_png_u16(path)); }

void write_depth_png(const fs::path& path, const Grid& depth_m) {
  write_png_u16(path, depth_to_u16(depth_m));
}

KeyValues parse_kv(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_kv_file(const fs::path& path) { return parse_kv(read_file_bytes(path)); }

std::string format_kv(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

namespace {

constexpr char kCheckpointMagic[] = "PNCNN-CHECKPOINT";

}  // namespace

std::string encode_checkpoint(const Pipeline& p, const KeyValues& metadata) {
  std::ostringstream head;
  head << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  head << "seed=" << p.seed() << '\n';
  for (const auto& [k, v] : p.config().to_kv()) head << "config." << k << '=' << v << '\n';
  for (const auto& [k, v] : metadata) {
    if (k.find('\n') != std::string::npos || v.find('\n') != std::string::npos) {
      throw ConfigError("checkpoint metadata must be single-line");
    }
    head << "meta." << k << '=' << v << '\n';
  }
  std::string blobs;
  const auto params = p.parameters();
  head << "params=" << params.size() << '\n';
  for (const auto& prm : params) {
    const auto& t = *prm.tensor;
    const std::size_t rows = t.rank() > 1 ? t.dim(0) : 1;
    Grid g(rows, t.size() / std::max<std::size_t>(rows, 1), t.storage());
    const auto blob = encode_grid(g, GridDType::F64);
    head << "param " << prm.name << ' ' << shape_str(t.shape()) << ' ' << blob.size() << '\n';
    blobs += blob;
  }
  head << "end\n";
  return head.str() + blobs;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("checkpoint: truncated manifest");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  const std::string magic = next_line();
  const std::string expect = std::string(kCheckpointMagic) + ' ';
  if (magic.rfind(expect, 0) != 0) throw FormatError("checkpoint: bad magic");
  const std::string version = magic.substr(expect.size());
  if (version != std::to_string(kCheckpointVersion)) {
    throw FormatError("checkpoint: unsupported version " + version + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  KeyValues config_kv;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t bytes;
  };
  std::vector<Entry> entries;
  std::size_t declared = 0;
  bool have_seed = false;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    if (line.rfind("param ", 0) == 0) {
      std::istringstream ls(line.substr(6));
      Entry e;
      std::string shape;
      if (!(ls >> e.name >> shape >> e.bytes) || shape.size() < 2 || shape.front() != '[' ||
          shape.back() != ']') {
        throw FormatError("checkpoint: bad param line '" + line + "'");
      }
      std::stringstream ss(shape.substr(1, shape.size() - 2));
      std::string d;
      while (std::getline(ss, d, ',')) e.shape.push_back(std::stoul(d));
      entries.push_back(std::move(e));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: bad manifest line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "seed") {
        ck.seed = std::stoull(value);
        have_seed = true;
      } else if (key == "params") {
        declared = std::stoul(value);
      } else if (key.rfind("config.", 0) == 0) {
        config_kv[key.substr(7)] = value;
      } else if (key.rfind("meta.", 0) == 0) {
        ck.metadata[key.substr(5)] = value;
      } else {
        throw FormatError("checkpoint: unknown manifest key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint: bad value for '" + key + "'");
    }
  }
  if (!have_seed || entries.size() != declared) throw FormatError("checkpoint: incomplete manifest");
  try {
    ck.config = PipelineConfig::from_kv(config_kv);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad config: ") + e.what());
  }
  for (auto& e : entries) {
    const std::size_t start = pos;
    Grid g = decode_grid(bytes, pos);
    if (pos - start != e.bytes || g.size() != shape_numel(e.shape)) {
      throw FormatError("checkpoint: parameter '" + e.name + "' size mismatch");
    }
    ck.params.emplace_back(e.name, DiffTensor(e.shape, std::move(g.data)));
  }
  if (pos != bytes.size()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const fs::path& path, const Pipeline& p, const KeyValues& metadata) {
  atomic_write_bytes(path, encode_checkpoint(p, metadata));
}

Pipeline pipeline_from_checkpoint(const Checkpoint& ck) {
  Pipeline p(ck.config, ck.seed);
  auto params = p.parameters();
  if (params.size() != ck.params.size()) {
    throw FormatError("checkpoint: parameter count " + std::to_string(ck.params.size()) +
                      " does not match architecture (" + std::to_string(params.size()) + ")");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, tensor] = ck.params[i];
    if (name != params[i].name || tensor.shape() != params[i].tensor->shape()) {
      throw FormatError("checkpoint: parameter '" + name + "' does not match architecture");
    }
    std::copy(tensor.data().begin(), tensor.data().end(), params[i].tensor->data().begin());
  }
  return p;
}

Pipeline load_pipeline(const fs::path& path, KeyValues* metadata) {
  const auto ck = decode_checkpoint(read_file_bytes(path));
  if (metadata) *metadata = ck.metadata;
  return pipeline_from_checkpoint(ck);
}

}  // namespace pncnn
