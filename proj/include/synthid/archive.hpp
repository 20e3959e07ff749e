#pragma once

// Versioned checkpoint archive.
//
// Layout (little-endian):
//   8 bytes   magic "SIDARCH\0"
//   u32       format version
//   u64       header length L
//   L bytes   JSON header: {"meta": {...}, "tensors": [{"name","dtype","shape","offset"}...]}
//   payload   raw tensor data, each entry at its recorded offset from payload start
//
// Writes go to a temporary sibling and are renamed into place.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "synthid/tensor.hpp"

namespace synthid {

inline constexpr char kArchiveMagic[8] = {'S', 'I', 'D', 'A', 'R', 'C', 'H', '\0'};
inline constexpr std::uint32_t kArchiveFormatVersion = 1;

class Archive {
public:
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();

    void put(const std::string& name, const Tensor<float>& t) { put_impl(name, "f4", t.shape, t.data); }
    void put(const std::string& name, const Tensor<double>& t) { put_impl(name, "f8", t.shape, t.data); }

    bool has(const std::string& name) const { return find(name) != nullptr; }

    Tensor<float> get_f4(const std::string& name) const { return get_impl<float>(name, "f4"); }
    Tensor<double> get_f8(const std::string& name) const { return get_impl<double>(name, "f8"); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::ordered_json header;
        header["meta"] = meta;
        header["tensors"] = nlohmann::ordered_json::array();
        std::uint64_t offset = 0;
        for (const auto& e : entries_) {
            header["tensors"].push_back({{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}});
            offset += e.bytes.size();
        }
        const std::string h = header.dump();
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        const auto tmp = std::filesystem::path(path.string() + ".tmp");
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cannot write archive " + tmp.string());
            const std::uint32_t version = kArchiveFormatVersion;
            const std::uint64_t len = h.size();
            out.write(kArchiveMagic, sizeof kArchiveMagic);
            out.write(reinterpret_cast<const char*>(&version), sizeof version);
            out.write(reinterpret_cast<const char*>(&len), sizeof len);
            out.write(h.data(), static_cast<std::streamsize>(h.size()));
            for (const auto& e : entries_) out.write(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
            if (!out) throw IoError("short write on archive " + tmp.string());
        }
        std::filesystem::rename(tmp, path);
    }

    static Archive load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open archive " + path.string());
        char magic[8];
        std::uint32_t version = 0;
        std::uint64_t len = 0;
        in.read(magic, sizeof magic);
        in.read(reinterpret_cast<char*>(&version), sizeof version);
        in.read(reinterpret_cast<char*>(&len), sizeof len);
        if (!in || std::memcmp(magic, kArchiveMagic, sizeof magic) != 0)
            throw ConfigError(path.string() + " is not a synthid archive");
        if (version != kArchiveFormatVersion)
            throw ConfigError("archive format version " + std::to_string(version) + " unsupported (expected " +
                              std::to_string(kArchiveFormatVersion) + ")");
        std::string h(len, '\0');
        in.read(h.data(), static_cast<std::streamsize>(len));
        const auto header = nlohmann::ordered_json::parse(h);
        Archive a;
        a.meta = header.at("meta");
        const auto payload_start = in.tellg();
        for (const auto& t : header.at("tensors")) {
            Entry e;
            e.name = t.at("name").get<std::string>();
            e.dtype = t.at("dtype").get<std::string>();
            e.shape = t.at("shape").get<Shape>();
            const std::size_t elem = e.dtype == "f8" ? 8 : 4;
            e.bytes.resize(shape_numel(e.shape) * elem);
            in.seekg(payload_start + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
            in.read(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
            if (!in) throw IoError("truncated archive " + path.string() + " at tensor " + e.name);
            a.entries_.push_back(std::move(e));
        }
        return a;
    }

private:
    struct Entry {
        std::string name, dtype;
        Shape shape;
        std::string bytes;
    };
    std::vector<Entry> entries_;

    const Entry* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    template <typename T>
    void put_impl(const std::string& name, const char* dtype, const Shape& shape, const Buffer<T>& data) {
        if (has(name)) throw ConfigError("archive already holds tensor " + name);
        Entry e{name, dtype, shape, std::string(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(T))};
        entries_.push_back(std::move(e));
    }

    template <typename T>
    Tensor<T> get_impl(const std::string& name, const char* dtype) const {
        const Entry* e = find(name);
        if (!e) throw ConfigError("archive has no tensor " + name);
        if (e->dtype != dtype) throw ConfigError("tensor " + name + " stored as " + e->dtype);
        Tensor<T> t(e->shape);
        std::memcpy(t.data.data(), e->bytes.data(), e->bytes.size());
        return t;
    }
};

} // namespace synthid
