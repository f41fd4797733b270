#include "mbt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace mbt {

namespace {

constexpr char kMagic[4] = {'M', 'B', 'T', '1'};

void put_u32(std::ostream& out, u32 v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, u64 v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(b), 8);
}

void read_exact(std::istream& in, void* dst, size_t n, const std::string& path) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) throw FormatError("checkpoint: truncated file " + path);
}

u32 get_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    read_exact(in, b, 4, path);
    u32 v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<u32>(b[i]) << (8 * i);
    return v;
}

u64 get_u64(std::istream& in, const std::string& path) {
    unsigned char b[8];
    read_exact(in, b, 8, path);
    u64 v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<u64>(b[i]) << (8 * i);
    return v;
}

std::string join_ints(const std::vector<int>& vals) {
    std::string s;
    for (size_t i = 0; i < vals.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(vals[i]);
    }
    return s;
}

}  // namespace

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : tensors)
        if (e.name == name) return &e;
    return nullptr;
}

const std::string* Checkpoint::config_value(const std::string& key) const {
    for (const auto& [k, v] : config)
        if (k == key) return &v;
    return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("checkpoint: cannot write " + path);
    out.write(kMagic, 4);
    put_u32(out, ckpt.version);

    std::string cfg_text;
    for (const auto& [k, v] : ckpt.config) cfg_text += k + "=" + v + "\n";
    put_u32(out, static_cast<u32>(cfg_text.size()));
    out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));

    put_u64(out, static_cast<u64>(ckpt.tensors.size()));
    for (const auto& e : ckpt.tensors) {
        put_u32(out, static_cast<u32>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        out.put(static_cast<char>(0));  // dtype: float32
        out.put(static_cast<char>(e.dims.size()));
        u64 numel = 1;
        for (u64 d : e.dims) {
            put_u64(out, d);
            numel *= d;
        }
        if (numel != e.data.size()) throw ValueError("checkpoint: dims do not match data for " + e.name);
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<std::streamsize>(e.data.size() * sizeof(float)));
    }
    put_u64(out, ckpt.step);
    if (!out) throw FormatError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path);
    char magic[4];
    read_exact(in, magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("checkpoint: bad magic in " + path);

    Checkpoint ckpt;
    ckpt.version = get_u32(in, path);
    if (ckpt.version != 1) throw FormatError("checkpoint: unsupported version " + std::to_string(ckpt.version));

    const u32 cfg_len = get_u32(in, path);
    std::string cfg_text(cfg_len, '\0');
    if (cfg_len) read_exact(in, cfg_text.data(), cfg_len, path);
    std::istringstream cfg_in(cfg_text);
    std::string line;
    while (std::getline(cfg_in, line)) {
        const size_t eq = line.find('=');
        if (eq != std::string::npos) ckpt.config.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }

    const u64 count = get_u64(in, path);
    std::set<std::string> seen;
    ckpt.tensors.reserve(static_cast<size_t>(count));
    for (u64 i = 0; i < count; ++i) {
        Checkpoint::Entry e;
        const u32 name_len = get_u32(in, path);
        e.name.resize(name_len);
        if (name_len) read_exact(in, e.name.data(), name_len, path);
        if (!seen.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor name " + e.name);
        unsigned char dtype = 0, rank = 0;
        read_exact(in, &dtype, 1, path);
        read_exact(in, &rank, 1, path);
        if (dtype != 0) throw FormatError("checkpoint: unknown dtype code " + std::to_string(dtype));
        u64 numel = 1;
        for (int d = 0; d < rank; ++d) {
            e.dims.push_back(get_u64(in, path));
            numel *= e.dims.back();
        }
        e.data.resize(static_cast<size_t>(numel));
        if (numel) read_exact(in, e.data.data(), static_cast<size_t>(numel) * sizeof(float), path);
        ckpt.tensors.push_back(std::move(e));
    }
    ckpt.step = get_u64(in, path);
    return ckpt;
}

namespace {

Checkpoint::Entry entry_of(const std::string& name, const Tensor<float>& t) {
    Checkpoint::Entry e;
    e.name = name;
    for (i64 d : t.shape()) e.dims.push_back(static_cast<u64>(d));
    e.data = t.buffer();
    return e;
}

}  // namespace

Checkpoint make_checkpoint(const ModelConfig& cfg, int epoch, const ParamTree<float>& params,
                           const EmaState<float>& ema, const AdamState<float>& adam) {
    Checkpoint ckpt;
    ckpt.config = {
        {"scale", std::to_string(cfg.scale)},
        {"channels", std::to_string(cfg.channels)},
        {"n_cptb", std::to_string(cfg.n_cptb)},
        {"n_spal", std::to_string(cfg.n_spal)},
        {"heads", std::to_string(cfg.heads)},
        {"c1", std::to_string(cfg.c1)},
        {"c2", std::to_string(cfg.c2)},
        {"pool_ratios", join_ints(cfg.pool_ratios)},
        {"ffn_ratio", std::to_string(cfg.ffn_ratio)},
        {"cab_squeeze", std::to_string(cfg.cab_squeeze)},
        {"prm_hidden", std::to_string(cfg.prm_hidden)},
        {"epoch", std::to_string(epoch)},
    };
    for (const auto& [name, t] : params.items()) ckpt.tensors.push_back(entry_of(name, t));
    for (const auto& [name, t] : ema.shadow.items()) ckpt.tensors.push_back(entry_of("ema/" + name, t));
    for (size_t i = 0; i < params.size(); ++i) {
        ckpt.tensors.push_back(entry_of("opt/m/" + params.items()[i].first, adam.m[i]));
        ckpt.tensors.push_back(entry_of("opt/v/" + params.items()[i].first, adam.v[i]));
    }
    ckpt.step = static_cast<u64>(adam.t);
    return ckpt;
}

ModelConfig config_from_checkpoint(const Checkpoint& ckpt) {
    ModelConfig cfg;
    auto want_int = [&](const char* key, int& dst) {
        if (const std::string* v = ckpt.config_value(key)) dst = std::stoi(*v);
    };
    want_int("scale", cfg.scale);
    want_int("channels", cfg.channels);
    want_int("n_cptb", cfg.n_cptb);
    want_int("n_spal", cfg.n_spal);
    want_int("heads", cfg.heads);
    want_int("c1", cfg.c1);
    want_int("c2", cfg.c2);
    want_int("ffn_ratio", cfg.ffn_ratio);
    want_int("cab_squeeze", cfg.cab_squeeze);
    want_int("prm_hidden", cfg.prm_hidden);
    if (const std::string* v = ckpt.config_value("pool_ratios")) {
        cfg.pool_ratios.clear();
        std::istringstream in(*v);
        std::string tok;
        while (std::getline(in, tok, ',')) cfg.pool_ratios.push_back(std::stoi(tok));
    }
    cfg.validate();
    return cfg;
}

int epoch_from_checkpoint(const Checkpoint& ckpt) {
    const std::string* v = ckpt.config_value("epoch");
    return v ? std::stoi(*v) : -1;
}

void restore_params(const Checkpoint& ckpt, ParamTree<float>& params, const std::string& prefix) {
    for (auto& [name, t] : params.items()) {
        const Checkpoint::Entry* e = ckpt.find(prefix + name);
        if (!e) throw FormatError("checkpoint: missing tensor " + prefix + name);
        if (static_cast<i64>(e->data.size()) != t.numel())
            throw FormatError("checkpoint: size mismatch for " + prefix + name);
        t.buffer() = e->data;
    }
}

void restore_adam(const Checkpoint& ckpt, const ParamTree<float>& params, AdamState<float>& adam) {
    if (adam.m.size() != params.size()) throw ValueError("checkpoint: adam state size mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        const std::string& name = params.items()[i].first;
        for (auto [prefix, slot] : {std::pair<const char*, Tensor<float>*>{"opt/m/", &adam.m[i]},
                                    std::pair<const char*, Tensor<float>*>{"opt/v/", &adam.v[i]}}) {
            const Checkpoint::Entry* e = ckpt.find(prefix + name);
            if (!e) throw FormatError(std::string("checkpoint: missing tensor ") + prefix + name);
            if (static_cast<i64>(e->data.size()) != slot->numel())
                throw FormatError(std::string("checkpoint: size mismatch for ") + prefix + name);
            slot->buffer() = e->data;
        }
    }
    adam.t = static_cast<i64>(ckpt.step);
}

}  // namespace mbt
