#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "stalab/error.hpp"
#include "stalab/hash.hpp"
#include "stalab/model.hpp"

namespace stalab {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'A', 'L', 'A', 'B', 'C', '1'};

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["layers"] = c.layers;
    j["heads"] = c.heads;
    j["model_dim"] = c.model_dim;
    j["ffn_dim"] = c.ffn_dim;
    j["context_len"] = c.context_len;
    j["vocab_size"] = c.vocab_size;
    j["seed"] = c.seed;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

} // namespace

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
    if (!ckpt.weights.all_finite()) throw Divergence("refusing to save non-finite weights for " + ckpt.id);
    std::string blob;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    ckpt.weights.for_each([&](const std::string& name, const Mat<float>& m) {
        nlohmann::ordered_json t;
        t["name"] = name;
        t["shape"] = {m.rows(), m.cols()};
        t["dtype"] = "float32";
        t["offset"] = blob.size();
        t["nbytes"] = static_cast<std::size_t>(m.size()) * sizeof(float);
        tensors.push_back(t);
        blob.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(float));
    });
    nlohmann::ordered_json header;
    header["format"] = "stalab-checkpoint";
    header["version"] = 1;
    header["id"] = ckpt.id;
    header["config"] = config_to_json(ckpt.config);
    header["provenance"] = ckpt.provenance.label();
    header["training_manifest"] = ckpt.training_manifest;
    header["rng_seed"] = ckpt.rng_seed;
    header["tensors"] = tensors;
    header["checksum"] = "sha256:" + sha256_hex(blob);
    const std::string text = header.dump();

    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp);
        const std::uint64_t len = text.size();
        out.write(kMagic, sizeof kMagic);
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) throw IoError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("missing checkpoint " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string data = ss.str();
    if (data.size() < sizeof kMagic + 8 || std::memcmp(data.data(), kMagic, sizeof kMagic) != 0)
        throw CorruptArtifact("bad checkpoint magic in " + path.string());
    std::uint64_t len = 0;
    std::memcpy(&len, data.data() + sizeof kMagic, sizeof len);
    const std::size_t header_start = sizeof kMagic + sizeof len;
    if (header_start + len > data.size()) throw CorruptArtifact("truncated checkpoint header");
    const auto header = nlohmann::json::parse(data.substr(header_start, len));
    const std::string blob = data.substr(header_start + len);
    if (header.at("checksum").get<std::string>() != "sha256:" + sha256_hex(blob))
        throw CorruptArtifact("checksum mismatch in " + path.string());

    ModelCheckpoint ckpt;
    ckpt.id = header.at("id").get<std::string>();
    ckpt.config = config_from_json(header.at("config"));
    ckpt.config.validate();
    ckpt.provenance = Provenance::parse(header.at("provenance").get<std::string>());
    ckpt.training_manifest = header.at("training_manifest").get<std::vector<std::string>>();
    ckpt.rng_seed = header.at("rng_seed").get<std::uint64_t>();
    ckpt.weights = Params<float>::zeros(ckpt.config);

    std::size_t idx = 0;
    const auto& tensors = header.at("tensors");
    ckpt.weights.for_each([&](const std::string& name, Mat<float>& m) {
        if (idx >= tensors.size()) throw CorruptArtifact("missing tensor " + name);
        const auto& t = tensors[idx++];
        if (t.at("name").get<std::string>() != name || t.at("dtype").get<std::string>() != "float32" ||
            t.at("shape")[0].get<Eigen::Index>() != m.rows() || t.at("shape")[1].get<Eigen::Index>() != m.cols())
            throw CorruptArtifact("tensor table mismatch at " + name);
        const auto off = t.at("offset").get<std::size_t>();
        const auto nbytes = t.at("nbytes").get<std::size_t>();
        if (off + nbytes > blob.size() || nbytes != static_cast<std::size_t>(m.size()) * sizeof(float))
            throw CorruptArtifact("tensor " + name + " out of bounds");
        std::memcpy(m.data(), blob.data() + off, nbytes);
    });
    if (!ckpt.weights.all_finite()) throw CorruptArtifact("non-finite weights in " + path.string());
    return ckpt;
}

} // namespace stalab
