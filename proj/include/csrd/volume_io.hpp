#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "csrd/volume.hpp"

namespace csrd {

// RV3D on disk: `<name>.rv3d` holds float32 little-endian voxels in x-fastest
// order, `<name>.rv3d.json` holds the header
// {shape, spacing_mm, domain, dtype: "f32le"} and an optional "name".

std::filesystem::path rv3d_header_path(const std::filesystem::path& payload);

void write_rv3d(const std::filesystem::path& payload, const Volume3D& vol);
Volume3D read_rv3d(const std::filesystem::path& payload);

/// Writes a double grid (e.g. a residual) through float32, same format.
void write_rv3d(const std::filesystem::path& payload, const GridD& grid, const Vec3d& spacing,
                Domain domain, const std::string& name);

/// 64-bit FNV-1a of a byte range; used for manifest and artifact hashes.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_file(const std::filesystem::path& p);
std::string hex64(std::uint64_t v);

} // namespace csrd
