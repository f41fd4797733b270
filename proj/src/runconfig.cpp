#include "mbt/runconfig.hpp"

#include <fstream>
#include <sstream>

namespace mbt {

namespace {

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ValueError("config: key '" + key + "' expects an integer, got '" + value + "'");
    }
}

double to_double(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ValueError("config: key '" + key + "' expects a number, got '" + value + "'");
    }
}

}  // namespace

void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "scale") cfg.model.scale = to_int(key, value);
    else if (key == "channels") cfg.model.channels = to_int(key, value);
    else if (key == "n_cptb") cfg.model.n_cptb = to_int(key, value);
    else if (key == "n_spal") cfg.model.n_spal = to_int(key, value);
    else if (key == "heads") cfg.model.heads = to_int(key, value);
    else if (key == "c1") cfg.model.c1 = to_int(key, value);
    else if (key == "c2") cfg.model.c2 = to_int(key, value);
    else if (key == "ffn_ratio") cfg.model.ffn_ratio = to_int(key, value);
    else if (key == "cab_squeeze") cfg.model.cab_squeeze = to_int(key, value);
    else if (key == "prm_hidden") cfg.model.prm_hidden = to_int(key, value);
    else if (key == "pool_ratios") {
        std::vector<int> ratios;
        std::istringstream in(value);
        std::string tok;
        while (std::getline(in, tok, ',')) ratios.push_back(to_int(key, trim(tok)));
        cfg.model.pool_ratios = ratios;
    } else if (key == "batch_size") cfg.train.batch_size = to_int(key, value);
    else if (key == "epochs") cfg.train.epochs = to_int(key, value);
    else if (key == "lr") cfg.train.lr = to_double(key, value);
    else if (key == "lr_halve_epoch") cfg.train.lr_halve_epoch = to_int(key, value);
    else if (key == "patch_size") cfg.train.patch_size = to_int(key, value);
    else if (key == "seed") cfg.train.seed = static_cast<u64>(std::stoull(value));
    else if (key == "ema_decay") cfg.train.ema_decay = to_double(key, value);
    else if (key == "checkpoint_every") cfg.train.checkpoint_every = to_int(key, value);
    else if (key == "steps_per_epoch") cfg.train.steps_per_epoch = to_int(key, value);
    else if (key == "train_dir") cfg.train_dir = value;
    else if (key == "val_dir") cfg.val_dir = value;
    else if (key == "test_dir") cfg.test_dir = value;
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "ckpt") cfg.ckpt = value;
    else throw ValueError("config: unknown key '" + key + "'");
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValueError("config: cannot open " + path);
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValueError("config: line " + std::to_string(lineno) + " of " + path + " is not key=value");
        apply_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

std::string render_run_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "# resolved run configuration\n";
    os << "scale=" << cfg.model.scale << "\n";
    os << "channels=" << cfg.model.channels << "\n";
    os << "n_cptb=" << cfg.model.n_cptb << "\n";
    os << "n_spal=" << cfg.model.n_spal << "\n";
    os << "heads=" << cfg.model.heads << "\n";
    os << "c1=" << cfg.model.c1 << "\n";
    os << "c2=" << cfg.model.c2 << "\n";
    os << "pool_ratios=";
    for (size_t i = 0; i < cfg.model.pool_ratios.size(); ++i)
        os << (i ? "," : "") << cfg.model.pool_ratios[i];
    os << "\n";
    os << "ffn_ratio=" << cfg.model.ffn_ratio << "\n";
    os << "cab_squeeze=" << cfg.model.cab_squeeze << "\n";
    os << "prm_hidden=" << cfg.model.prm_hidden << "\n";
    os << "batch_size=" << cfg.train.batch_size << "\n";
    os << "epochs=" << cfg.train.epochs << "\n";
    os << "lr=" << cfg.train.lr << "\n";
    os << "lr_halve_epoch=" << cfg.train.lr_halve_epoch << "\n";
    os << "patch_size=" << cfg.train.patch_size << "\n";
    os << "seed=" << cfg.train.seed << "\n";
    os << "ema_decay=" << cfg.train.ema_decay << "\n";
    os << "checkpoint_every=" << cfg.train.checkpoint_every << "\n";
    os << "steps_per_epoch=" << cfg.train.steps_per_epoch << "\n";
    os << "train_dir=" << cfg.train_dir << "\n";
    os << "val_dir=" << cfg.val_dir << "\n";
    os << "test_dir=" << cfg.test_dir << "\n";
    os << "out_dir=" << cfg.out_dir << "\n";
    os << "ckpt=" << cfg.ckpt << "\n";
    return os.str();
}

}  // namespace mbt
