#include "csrd/volume_io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>

#include <json.hpp>

namespace csrd {

static_assert(std::endian::native == std::endian::little, "RV3D I/O assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

fs::path rv3d_header_path(const fs::path& payload) {
    fs::path h = payload;
    h += ".json";
    return h;
}

namespace {

void write_payload(const fs::path& payload, const float* data, std::size_t n) {
    std::ofstream os(payload, std::ios::binary);
    if (!os) throw IoError("cannot open '" + payload.string() + "' for writing");
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
    if (!os) throw IoError("short write to '" + payload.string() + "'");
}

void write_header(const fs::path& payload, const Vec3i& shape, const Vec3d& spacing, Domain domain,
                  const std::string& name) {
    json h;
    h["shape"] = {shape[0], shape[1], shape[2]};
    h["spacing_mm"] = {spacing[0], spacing[1], spacing[2]};
    h["domain"] = to_string(domain);
    h["dtype"] = "f32le";
    if (!name.empty()) h["name"] = name;
    std::ofstream os(rv3d_header_path(payload));
    if (!os) throw IoError("cannot write header for '" + payload.string() + "'");
    os << h.dump(2) << "\n";
}

} // namespace

void write_rv3d(const fs::path& payload, const Volume3D& vol) {
    write_payload(payload, vol.data.storage().data(), vol.data.size());
    write_header(payload, vol.shape(), vol.spacing, vol.domain, vol.name);
}

void write_rv3d(const fs::path& payload, const GridD& grid, const Vec3d& spacing, Domain domain,
                const std::string& name) {
    std::vector<float> f(grid.storage().begin(), grid.storage().end());
    write_payload(payload, f.data(), f.size());
    write_header(payload, grid.shape(), spacing, domain, name);
}

Volume3D read_rv3d(const fs::path& payload) {
    std::ifstream hs(rv3d_header_path(payload));
    if (!hs) throw IoError("missing RV3D header for '" + payload.string() + "'");
    json h;
    try {
        hs >> h;
    } catch (const json::exception& e) {
        throw IoError("malformed RV3D header for '" + payload.string() + "': " + e.what());
    }
    if (h.value("dtype", std::string{}) != "f32le")
        throw IoError("unsupported RV3D dtype in '" + payload.string() + "'");
    Vec3i shape;
    Vec3d spacing;
    try {
        for (int a = 0; a < 3; ++a) {
            shape[a] = h.at("shape").at(a).get<int>();
            spacing[a] = h.at("spacing_mm").at(a).get<double>();
        }
    } catch (const json::exception& e) {
        throw IoError("bad RV3D header fields in '" + payload.string() + "': " + e.what());
    }
    const Domain domain = domain_from_string(h.at("domain").get<std::string>());

    std::ifstream is(payload, std::ios::binary);
    if (!is) throw IoError("cannot open '" + payload.string() + "'");
    GridF grid(shape);
    const auto bytes = static_cast<std::streamsize>(grid.size() * sizeof(float));
    is.read(reinterpret_cast<char*>(grid.storage().data()), bytes);
    if (is.gcount() != bytes) throw IoError("truncated RV3D payload '" + payload.string() + "'");
    if (is.peek() != std::char_traits<char>::eof())
        throw IoError("RV3D payload larger than header shape '" + payload.string() + "'");

    Volume3D v(std::move(grid), spacing, domain, h.value("name", payload.stem().string()));
    v.validate();
    return v;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
    auto h = seed;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t hash_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot hash '" + p.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace csrd
