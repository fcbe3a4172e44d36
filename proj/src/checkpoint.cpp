#include "streamdit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace streamdit {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'C', 'K', 'P', 'T', '1', '\n'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

void copy_parameters(const nn::ParameterStore& from, nn::ParameterStore& to) {
    if (from.all().size() != to.all().size()) throw std::invalid_argument("copy_parameters: parameter count differs");
    for (std::size_t i = 0; i < from.all().size(); ++i) {
        const auto& src = from.all()[i];
        auto& dst = to.all()[i];
        if (src.name != dst.name || src.var.rows() != dst.var.rows() || src.var.cols() != dst.var.cols()) {
            throw std::invalid_argument("copy_parameters: mismatch at '" + src.name + "'");
        }
        dst.var.mutable_value() = src.var.value();
    }
}

void save_checkpoint(const std::filesystem::path& path, const model::TimeVaryingDiT& model,
                     const TrainingMetadata& meta) {
    nlohmann::json header;
    header["config"] = model.config();
    header["metadata"] = {{"seed", meta.seed}, {"steps", meta.steps}, {"kind", meta.kind}, {"provenance", meta.provenance}};
    header["parameter_hash"] = parameter_hash(model.parameters());
    auto& table = header["tensors"];
    table = nlohmann::json::array();
    for (const auto& p : model.parameters().all()) table.push_back({{"name", p.name}, {"rows", p.var.rows()}, {"cols", p.var.cols()}});
    const std::string text = header.dump();

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
        const std::uint64_t size = text.size();
        out.write(kMagic, sizeof(kMagic));
        out.write(reinterpret_cast<const char*>(&size), sizeof(size));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& p : model.parameters().all()) {
            // Eigen storage is column-major; the loader uses the same order.
            out.write(reinterpret_cast<const char*>(p.var.value().data()),
                      static_cast<std::streamsize>(p.var.value().size() * sizeof(double)));
        }
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[sizeof(kMagic)];
    std::uint64_t size = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&size), sizeof(size));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
    if (size > (1u << 26)) throw std::runtime_error("checkpoint header too large");
    std::string text(size, '\0');
    in.read(text.data(), static_cast<std::streamsize>(size));
    const auto header = nlohmann::json::parse(text);

    LoadedCheckpoint out{model::TimeVaryingDiT(header.at("config").get<model::ModelConfig>()), {}};
    const auto& md = header.at("metadata");
    out.meta.seed = md.at("seed").get<std::uint64_t>();
    out.meta.steps = md.at("steps").get<long>();
    out.meta.kind = md.at("kind").get<std::string>();
    out.meta.provenance = md.at("provenance");

    auto& params = out.model.parameters().all();
    const auto& table = header.at("tensors");
    if (table.size() != params.size()) throw std::runtime_error("checkpoint tensor count does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& t = table[i];
        auto& p = params[i];
        if (t.at("name").get<std::string>() != p.name || t.at("rows").get<long>() != p.var.rows() ||
            t.at("cols").get<long>() != p.var.cols()) {
            throw std::runtime_error("checkpoint tensor '" + t.at("name").get<std::string>() + "' does not match the model");
        }
        in.read(reinterpret_cast<char*>(p.var.mutable_value().data()),
                static_cast<std::streamsize>(p.var.value().size() * sizeof(double)));
    }
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
    if (header.at("parameter_hash").get<std::uint64_t>() != parameter_hash(out.model.parameters())) {
        throw std::runtime_error("checkpoint hash mismatch in " + path.string());
    }
    return out;
}

}  // namespace streamdit
