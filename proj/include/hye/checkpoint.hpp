#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>

#include "hye/binary_io.hpp"
#include "hye/denoiser.hpp"
#include "hye/scheduler.hpp"

namespace hye {

// Container layout (little-endian):
//   "HYCK" | u16 version | u64 body length | u32 entry count
//   entries: u8 kind | u16 name length | name | payload
//     kind 0 (tensor): u8 ndim | i64 dims[ndim] | f32 values
//     kind 1 (text):   u64 length | bytes
//   u32 CRC32 over everything before it
inline constexpr char kCheckpointMagic[4] = {'H', 'Y', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> texts;

    const Tensor& tensor(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw FormatError("checkpoint has no tensor '" + name + "'");
        return it->second;
    }

    const std::string& text(const std::string& name) const {
        auto it = texts.find(name);
        if (it == texts.end()) throw FormatError("checkpoint has no entry '" + name + "'");
        return it->second;
    }

    bool has_text(const std::string& name) const { return texts.count(name) != 0; }

    std::vector<std::uint8_t> encode() const {
        ByteWriter body;
        body.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size() + texts.size()));
        for (const auto& [name, t] : tensors) {
            body.put<std::uint8_t>(0);
            body.put_string16(name);
            body.put<std::uint8_t>(static_cast<std::uint8_t>(t.ndim()));
            for (auto d : t.shape()) body.put<std::int64_t>(d);
            body.put_floats(t.values());
        }
        for (const auto& [name, s] : texts) {
            body.put<std::uint8_t>(1);
            body.put_string16(name);
            body.put<std::uint64_t>(s.size());
            body.put_bytes(s.data(), s.size());
        }
        ByteWriter out;
        out.put_bytes(kCheckpointMagic, 4);
        out.put<std::uint16_t>(kCheckpointVersion);
        out.put<std::uint64_t>(body.size());
        out.put_bytes(body.bytes().data(), body.size());
        out.seal();
        return std::move(out.bytes());
    }

    static Checkpoint decode(const std::vector<std::uint8_t>& bytes) {
        const std::string what = "checkpoint";
        constexpr std::size_t header = 4 + 2 + 8;
        if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
            throw BadMagicError("not a checkpoint file (bad magic)");
        if (bytes.size() < header) throw TruncatedError("checkpoint: header truncated");
        ByteReader head(bytes.data(), header, what);
        head.take(4);
        const auto version = head.get<std::uint16_t>();
        if (version != kCheckpointVersion)
            throw VersionError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                               std::to_string(kCheckpointVersion) + ")");
        const auto body_len = head.get<std::uint64_t>();
        if (bytes.size() < header + body_len + 4)
            throw TruncatedError("checkpoint: file is " + std::to_string(bytes.size()) + " bytes, header declares " +
                                 std::to_string(header + body_len + 4));
        if (bytes.size() != header + body_len + 4) throw FormatError("checkpoint: trailing bytes after payload");
        verify_crc_trailer(bytes, what);

        Checkpoint c;
        ByteReader r(bytes.data() + header, body_len, what);
        const auto count = r.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto kind = r.get<std::uint8_t>();
            auto name = r.get_string16();
            if (kind == 0) {
                const auto nd = r.get<std::uint8_t>();
                Shape shape(nd);
                for (auto& d : shape) {
                    d = r.get<std::int64_t>();
                    if (d < 0) throw FormatError("checkpoint: negative dimension in '" + name + "'");
                }
                auto values = r.get_floats(static_cast<std::size_t>(numel(shape)));
                c.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
            } else if (kind == 1) {
                const auto n = r.get<std::uint64_t>();
                if (n > r.remaining()) throw TruncatedError("checkpoint: text entry overruns payload");
                const auto* p = r.take(n);
                c.texts.emplace(std::move(name), std::string(reinterpret_cast<const char*>(p), n));
            } else {
                throw FormatError("checkpoint: unknown entry kind " + std::to_string(kind));
            }
        }
        if (r.remaining() != 0) throw FormatError("checkpoint: unparsed bytes in payload");
        return c;
    }

    void save(const std::filesystem::path& path) const {
        auto bytes = encode();
        write_file_atomic(path, bytes.data(), bytes.size());
    }

    static Checkpoint load(const std::filesystem::path& path) { return decode(read_file(path)); }
};

// key=value lines; the round trip is exact because every field is integral
// or printed with full precision.
inline std::string encode_denoiser_config(const DenoiserConfig& c) {
    std::ostringstream os;
    os.precision(9);
    os << "base_channels=" << c.base_channels << "\ndepth=" << c.depth << "\ntime_embed_dim=" << c.time_embed_dim
       << "\ncond_channels=" << c.cond_channels << "\nimage_channels=" << c.image_channels << "\nchannel_mult=";
    for (std::size_t i = 0; i < c.channel_mult.size(); ++i) os << (i ? "," : "") << c.channel_mult[i];
    os << "\nattention_resolution=" << c.attention_resolution << "\nnorm_groups=" << c.norm_groups
       << "\nhint_source_channels=" << c.hint_source_channels << "\nlora_rank=" << c.lora_rank
       << "\nlora_scale=" << c.lora_scale << "\nlora_targets=" << c.lora_targets << "\n";
    return os.str();
}

inline DenoiserConfig decode_denoiser_config(const std::string& text) {
    DenoiserConfig c;
    std::istringstream is(text);
    std::string line;
    auto to_int = [](const std::string& v) { return std::stoi(v); };
    try {
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw FormatError("model config line without '=': " + line);
            const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
            if (key == "base_channels") c.base_channels = to_int(value);
            else if (key == "depth") c.depth = to_int(value);
            else if (key == "time_embed_dim") c.time_embed_dim = to_int(value);
            else if (key == "cond_channels") c.cond_channels = to_int(value);
            else if (key == "image_channels") c.image_channels = to_int(value);
            else if (key == "attention_resolution") c.attention_resolution = to_int(value);
            else if (key == "norm_groups") c.norm_groups = to_int(value);
            else if (key == "hint_source_channels") c.hint_source_channels = to_int(value);
            else if (key == "lora_rank") c.lora_rank = to_int(value);
            else if (key == "lora_scale") c.lora_scale = std::stof(value);
            else if (key == "lora_targets") c.lora_targets = static_cast<unsigned>(std::stoul(value));
            else if (key == "channel_mult") {
                c.channel_mult.clear();
                std::istringstream parts(value);
                std::string part;
                while (std::getline(parts, part, ',')) c.channel_mult.push_back(to_int(part));
            } else {
                throw FormatError("unknown model config key '" + key + "'");
            }
        }
    } catch (const std::logic_error&) {
        throw FormatError("malformed model config entry: " + line);
    }
    return c;
}

inline std::string encode_schedule(const NoiseSchedule& s) {
    std::ostringstream os;
    os.precision(17);
    os << to_string(s.kind) << ' ' << s.beta_min << ' ' << s.beta_max << ' ' << s.steps();
    for (double b : s.beta) os << ' ' << b;
    return os.str();
}

inline NoiseSchedule decode_schedule(const std::string& text) {
    std::istringstream is(text);
    std::string kind;
    double bmin = 0, bmax = 0;
    int steps = 0;
    is >> kind >> bmin >> bmax >> steps;
    if (!is || steps < 1) throw FormatError("malformed schedule entry");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (auto& b : betas) is >> b;
    if (!is) throw FormatError("schedule entry lists fewer betas than declared");
    auto s = schedule_from_betas(std::move(betas), parse_schedule_kind(kind));
    s.beta_min = bmin;
    s.beta_max = bmax;
    return s;
}

inline void store_model(const Denoiser& model, Checkpoint& c) {
    c.texts["model.config"] = encode_denoiser_config(model.config);
    auto& m = const_cast<Denoiser&>(model);
    m.visit_parameters([&](const std::string& name, Tensor& t, ParamGroup) { c.tensors["param/" + name] = t.detach(); });
}

/// Rebuilds the network described in the checkpoint and loads its weights.
/// Every parameter must be present with the recorded shape.
inline Denoiser restore_model(const Checkpoint& c) {
    auto config = decode_denoiser_config(c.text("model.config"));
    Rng scratch(0);
    auto model = build_denoiser(config, scratch);
    std::size_t used = 0;
    model.visit_parameters([&](const std::string& name, Tensor& t, ParamGroup) {
        const auto& stored = c.tensor("param/" + name);
        if (stored.shape() != t.shape())
            throw FormatError("checkpoint tensor '" + name + "' has shape " + to_string(stored.shape()) +
                              ", model expects " + to_string(t.shape()));
        t = stored.detach();
        ++used;
    });
    std::size_t stored = 0;
    for (const auto& [name, t] : c.tensors) stored += name.rfind("param/", 0) == 0;
    if (stored != used) throw FormatError("checkpoint holds parameters the model does not define");
    return model;
}

} // namespace hye
