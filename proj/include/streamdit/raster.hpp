#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "streamdit/tensor.hpp"

// Offline raster dumps: one binary PGM per frame, quantised exactly as on the
// wire, plus manifest.json describing the run.
namespace streamdit::raster {

struct Dump {
    Clip frames;  // dequantised, values k / 255
    nlohmann::json manifest;
};

/// Writes frame_%06d.pgm for stream indices first_index.. and the manifest,
/// with a "frames" array listing index and file name added.
void write_dump(const std::filesystem::path& dir, const Clip& frames, nlohmann::json manifest, long first_index = 0);

Dump read_dump(const std::filesystem::path& dir);

}  // namespace streamdit::raster
