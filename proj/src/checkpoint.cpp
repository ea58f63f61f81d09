#include "dreamclear/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace dreamclear {

namespace {

constexpr char kMagic[8] = {'D', 'C', 'L', 'R', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename U>
void write_pod(std::ostream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::istream& in, const std::filesystem::path& path) {
    U v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) throw std::runtime_error("truncated checkpoint " + path.string());
    return v;
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
        table.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(t.value.size());
    }
    const std::string manifest = nlohmann::json{{"config", ckpt.config}, {"tensors", table}}.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(kMagic, sizeof(kMagic));
        write_pod<std::uint32_t>(out, kCheckpointVersion);
        write_pod<std::uint64_t>(out, manifest.size());
        out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
        for (const auto& t : ckpt.tensors) {
            out.write(reinterpret_cast<const char*>(t.value.data()),
                      static_cast<std::streamsize>(t.value.size() * sizeof(float)));
        }
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw std::runtime_error("failed writing checkpoint " + path.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
        throw std::runtime_error(path.string() + " is not a checkpoint");
    }
    const auto version = read_pod<std::uint32_t>(in, path);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    }
    const auto len = read_pod<std::uint64_t>(in, path);
    std::string manifest(len, '\0');
    if (!in.read(manifest.data(), static_cast<std::streamsize>(len))) {
        throw std::runtime_error("truncated checkpoint manifest " + path.string());
    }
    const auto j = nlohmann::json::parse(manifest);
    Checkpoint ckpt;
    ckpt.config = j.at("config");
    const auto data_start = in.tellg();
    for (const auto& t : j.at("tensors")) {
        NamedTensor nt;
        nt.name = t.at("name").get<std::string>();
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        const auto offset = t.at("offset").get<std::uint64_t>();
        nt.value.resize(rows, cols);
        in.seekg(data_start + static_cast<std::streamoff>(offset * sizeof(float)));
        if (!in.read(reinterpret_cast<char*>(nt.value.data()), static_cast<std::streamsize>(nt.value.size() * sizeof(float)))) {
            throw std::runtime_error("truncated tensor " + nt.name + " in " + path.string());
        }
        ckpt.tensors.push_back(std::move(nt));
    }
    return ckpt;
}

std::vector<NamedTensor> export_params(const ParamStore<float>& store, const std::string& prefix) {
    std::vector<NamedTensor> out;
    for (const auto& [name, v] : store.entries()) {
        if (name.compare(0, prefix.size(), prefix) == 0) out.push_back({name, v->value});
    }
    return out;
}

ParamStore<float> store_from_tensors(const std::vector<NamedTensor>& tensors, const std::string& skip_prefix) {
    ParamStore<float> store;
    for (const auto& t : tensors) {
        if (!skip_prefix.empty() && t.name.compare(0, skip_prefix.size(), skip_prefix) == 0) continue;
        store.add(t.name, t.value);
    }
    return store;
}

void load_params(ParamStore<float>& store, const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const Matf*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t.value;
    for (auto& [name, v] : store.entries()) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint lacks parameter " + name);
        if (it->second->rows() != v->value.rows() || it->second->cols() != v->value.cols()) {
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        }
        v->value = *it->second;
    }
}

}  // namespace dreamclear
