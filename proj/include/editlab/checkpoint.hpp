#pragma once
// Named-tensor checkpoint files: 8-byte magic, little-endian u32 JSON header
// length, JSON header (metadata + tensor directory), raw float32 payload.

#include "editlab/common.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <map>
#include <string>

namespace editlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts unsupported");

inline constexpr char kCheckpointMagic[8] = {'E', 'D', 'L', 'A', 'B', 'C', 'K', '1'};

// In-memory view of a checkpoint. Matrices are stored as-is; vectors are
// n x 1 matrices. Values are float64 in memory but float32 on disk, so a
// load-save cycle reproduces the file byte for byte.
struct TensorStore {
    std::map<std::string, Matrix> tensors;
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();

    void put(const std::string& name, const Matrix& m) { tensors[name] = m; }
    void put(const std::string& name, const Vector& v) { tensors[name] = m_from(v); }

    bool has(const std::string& name) const { return tensors.count(name) > 0; }

    const Matrix& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            fail("checkpoint tensor '", name, "' not found");
        }
        return it->second;
    }

    Vector get_vector(const std::string& name) const {
        const Matrix& m = get(name);
        require(m.cols() == 1, "tensor is not a vector");
        return m.col(0);
    }

  private:
    static Matrix m_from(const Vector& v) {
        Matrix m(v.size(), 1);
        m.col(0) = v;
        return m;
    }
};

inline void save_tensors(const TensorStore& store, const std::filesystem::path& path) {
    nlohmann::ordered_json header;
    header["meta"] = store.meta;
    nlohmann::ordered_json dir = nlohmann::ordered_json::object();
    std::size_t offset = 0;
    for (const auto& [name, m] : store.tensors) {
        const std::size_t count = static_cast<std::size_t>(m.size());
        dir[name] = {{"shape", {m.rows(), m.cols()}}, {"dtype", "f32"}, {"offset", offset}, {"count", count}};
        offset += count * sizeof(float);
    }
    header["tensors"] = std::move(dir);
    const std::string header_bytes = header.dump();
    require(header_bytes.size() <= 0xffffffffull, "checkpoint header too large");

    std::string out;
    out.reserve(sizeof(kCheckpointMagic) + 4 + header_bytes.size() + offset);
    out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t hlen = static_cast<std::uint32_t>(header_bytes.size());
    out.append(reinterpret_cast<const char*>(&hlen), 4);
    out += header_bytes;
    for (const auto& [name, m] : store.tensors) {
        (void)name;
        // Row-major float32 payload.
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                const float f = static_cast<float>(m(i, j));
                char buf[sizeof(float)];
                std::memcpy(buf, &f, sizeof(float));
                out.append(buf, sizeof(float));
            }
        }
    }
    write_file_bytes(path, out);
}

inline TensorStore load_tensors(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < sizeof(kCheckpointMagic) + 4 ||
        std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        fail("not a checkpoint file: ", path.string());
    }
    std::uint32_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + sizeof(kCheckpointMagic), 4);
    const std::size_t payload_start = sizeof(kCheckpointMagic) + 4 + hlen;
    if (payload_start > bytes.size()) {
        fail("checkpoint header truncated: ", path.string());
    }
    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(bytes.substr(sizeof(kCheckpointMagic) + 4, hlen));
    } catch (const nlohmann::json::parse_error& e) {
        fail("checkpoint header is not valid JSON: ", e.what());
    }

    TensorStore store;
    store.meta = header.value("meta", nlohmann::ordered_json::object());
    const std::string payload = bytes.substr(payload_start);
    for (const auto& [name, info] : header.at("tensors").items()) {
        require(info.at("dtype").get<std::string>() == "f32", "unsupported tensor dtype");
        const auto shape = info.at("shape");
        const Eigen::Index rows = shape.at(0).get<Eigen::Index>();
        const Eigen::Index cols = shape.at(1).get<Eigen::Index>();
        const std::size_t offset = info.at("offset").get<std::size_t>();
        const std::size_t count = info.at("count").get<std::size_t>();
        require(count == static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols),
                "tensor count/shape mismatch");
        if (offset + count * sizeof(float) > payload.size()) {
            fail("checkpoint payload truncated for tensor '", name, "'");
        }
        Matrix m(rows, cols);
        const char* src = payload.data() + offset;
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (Eigen::Index j = 0; j < cols; ++j) {
                float f;
                std::memcpy(&f, src, sizeof(float));
                src += sizeof(float);
                m(i, j) = static_cast<double>(f);
            }
        }
        store.tensors[name] = std::move(m);
    }
    return store;
}

}  // namespace editlab
