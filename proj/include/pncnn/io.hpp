#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pncnn/grid.hpp"
#include "pncnn/networks.hpp"

namespace pncnn {

namespace fs = std::filesystem;

/// Writes to a sibling temporary file and renames it into place.
void atomic_write_bytes(const fs::path& path, const std::string& bytes);
void atomic_write_text(const fs::path& path, const std::string& text);
std::string read_file_bytes(const fs::path& path);

// ---------------------------------------------------------------------------
// CGRD1 grid files: "CGRD1", one dtype byte, rows and cols as little-endian
// u32, then the row-major little-endian payload.

enum class GridDType : std::uint8_t { F32 = 0, F64 = 1, U16 = 2 };

std::size_t dtype_size(GridDType t);
std::string encode_grid(const Grid& g, GridDType dtype = GridDType::F64);
/// Decodes a grid starting at `offset`; advances `offset` past it.
Grid decode_grid(const std::string& bytes, std::size_t& offset, GridDType* dtype = nullptr);
void write_grid_file(const fs::path& path, const Grid& g, GridDType dtype = GridDType::F64);
Grid read_grid_file(const fs::path& path, GridDType* dtype = nullptr);

// ---------------------------------------------------------------------------
// 16-bit PNG depth maps: depth_m = stored / 256, stored 0 = missing.

struct U16Image {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint16_t> pixels;
};

U16Image read_png_u16(const fs::path& path);
void write_png_u16(const fs::path& path, const U16Image& img);

/// Depth in meters; missing pixels load as 0.
Grid read_depth_png(const fs::path& path);
/// Throws DomainError if any depth would encode above 65535 or is negative.
void write_depth_png(const fs::path& path, const Grid& depth_m);
U16Image depth_to_u16(const Grid& depth_m);
Grid u16_to_depth(const U16Image& img);

// ---------------------------------------------------------------------------
// Flat key=value configuration ('#' starts a comment line).

using KeyValues = std::map<std::string, std::string>;
KeyValues parse_kv(const std::string& text);
KeyValues read_kv_file(const fs::path& path);
std::string format_kv(const KeyValues& kv);

// ---------------------------------------------------------------------------
// Checkpoints: a text manifest (format version, seed, pipeline config, extra
// metadata, parameter table) followed by one CGRD1 f64 blob per parameter.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  PipelineConfig config;
  std::uint64_t seed = 0;
  KeyValues metadata;
  std::vector<std::pair<std::string, DiffTensor>> params;
};

std::string encode_checkpoint(const Pipeline& p, const KeyValues& metadata = {});
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const fs::path& path, const Pipeline& p, const KeyValues& metadata = {});
/// Rebuilds the pipeline and restores every parameter bit-exactly.
Pipeline load_pipeline(const fs::path& path, KeyValues* metadata = nullptr);
Pipeline pipeline_from_checkpoint(const Checkpoint& ck);

}  // namespace pncnn
