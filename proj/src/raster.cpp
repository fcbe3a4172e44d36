#include "streamdit/raster.hpp"

#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

#include "streamdit/wire.hpp"

namespace streamdit::raster {

void write_dump(const std::filesystem::path& dir, const Clip& frames, nlohmann::json manifest, long first_index) {
    if (frames.frame_shape().channels != 1) throw std::invalid_argument("raster dump: grayscale frames only");
    std::filesystem::create_directories(dir);
    const FrameShape s = frames.frame_shape();
    nlohmann::json list = nlohmann::json::array();
    for (int f = 0; f < frames.frames(); ++f) {
        const long index = first_index + f;
        const auto msg = wire::decode_frame(wire::encode_frame(frames.frame_tensor(f), static_cast<std::uint64_t>(index), 0));
        const std::string name = fmt::format("frame_{:06d}.pgm", index);
        std::ofstream out(dir / name, std::ios::binary);
        out << "P5\n" << s.width << ' ' << s.height << "\n255\n";
        out.write(reinterpret_cast<const char*>(msg.payload.data()), static_cast<std::streamsize>(msg.payload.size()));
        if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
        list.push_back({{"index", index}, {"file", name}});
    }
    manifest["frames"] = std::move(list);
    manifest["width"] = s.width;
    manifest["height"] = s.height;
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Dump read_dump(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no manifest in " + dir.string());
    Dump d;
    d.manifest = nlohmann::json::parse(in);
    const FrameShape shape{1, d.manifest.at("height").get<int>(), d.manifest.at("width").get<int>()};
    const auto& list = d.manifest.at("frames");
    d.frames = Clip(static_cast<int>(list.size()), shape);
    for (int f = 0; f < d.frames.frames(); ++f) {
        const auto path = dir / list[static_cast<std::size_t>(f)].at("file").get<std::string>();
        std::ifstream pgm(path, std::ios::binary);
        std::string magic;
        int w = 0, h = 0, maxval = 0;
        pgm >> magic >> w >> h >> maxval;
        pgm.get();
        if (magic != "P5" || w != shape.width || h != shape.height || maxval != 255) {
            throw std::runtime_error(path.string() + " is not a matching 8-bit PGM");
        }
        std::vector<unsigned char> px(shape.size());
        pgm.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
        if (!pgm) throw std::runtime_error("truncated " + path.string());
        auto out = d.frames.frame(f);
        for (std::size_t k = 0; k < px.size(); ++k) out[k] = px[k] / 255.0;
    }
    return d;
}

}  // namespace streamdit::raster
