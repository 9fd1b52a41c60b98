#include <fstream>
#include <sstream>

#include "ramnet/harness.hpp"

namespace ramnet {

using nlohmann::json;

std::uint64_t model_state_size(const ModelConfig& cfg, std::uint64_t seq_len) {
    BaselineSpec spec;
    spec.heads = static_cast<std::uint64_t>(cfg.heads);
    spec.layers = static_cast<std::uint64_t>(cfg.layers);
    spec.value_dim = static_cast<std::uint64_t>(cfg.value_dim);
    spec.key_dim = static_cast<std::uint64_t>(cfg.head_key_dim());
    switch (cfg.kind) {
        case MixerKind::ramnet:
            spec.kind = BaselineKind::ramnet;
            spec.capacity = cfg.decoder().capacity();
            break;
        case MixerKind::full_attention: spec.kind = BaselineKind::full_attention; break;
        case MixerKind::linear_attention: spec.kind = BaselineKind::linear_attention; break;
    }
    return state_size(spec, seq_len);
}

namespace {

SweepPoint ramnet_point(const RunConfig& base, int partitions, int sub_dim) {
    SweepPoint p;
    p.run = base;
    p.run.model.kind = MixerKind::ramnet;
    p.run.model.partitions = partitions;
    p.run.model.sub_dim = sub_dim;
    const auto M = p.run.model.decoder().capacity();
    p.label = "U=" + std::to_string(partitions) + ",M=" + std::to_string(M);
    p.run.name = base.name + "/" + p.label;
    return p;
}

SweepPoint baseline_point(const RunConfig& base, MixerKind kind, int key_dim) {
    SweepPoint p;
    p.run = base;
    p.run.model.kind = kind;
    p.run.model.key_dim = key_dim;
    p.label = std::string(to_string(kind)) + ",d_k=" + std::to_string(key_dim);
    p.run.name = base.name + "/" + p.label;
    return p;
}

}  // namespace

std::vector<SweepPoint> sweep_preset(const std::string& name, const RunConfig& base) {
    std::vector<SweepPoint> out;
    if (name == "order") {
        // M = 256 throughout.
        out.push_back(ramnet_point(base, 1, 256));
        out.push_back(ramnet_point(base, 2, 16));
        out.push_back(ramnet_point(base, 4, 4));
    } else if (name == "capacity") {
        out.push_back(ramnet_point(base, 2, 8));
        out.push_back(ramnet_point(base, 2, 16));
        out.push_back(ramnet_point(base, 2, 32));
    } else if (name == "state-size") {
        out.push_back(ramnet_point(base, 2, 4));
        out.push_back(ramnet_point(base, 2, 8));
        out.push_back(ramnet_point(base, 4, 4));
        out.push_back(baseline_point(base, MixerKind::linear_attention, 8));
        out.push_back(baseline_point(base, MixerKind::linear_attention, 16));
        out.push_back(baseline_point(base, MixerKind::linear_attention, 32));
        out.push_back(baseline_point(base, MixerKind::full_attention, 16));
    } else {
        throw ConfigError("unknown sweep '" + name + "' (order, capacity, state-size)");
    }
    for (auto& p : out) p.run.validate();
    return out;
}

std::vector<SweepRow> run_sweep(std::span<const SweepPoint> points, std::span<const std::uint64_t> seeds,
                                const std::function<void(const SweepRow&)>& on_row) {
    std::vector<SweepRow> rows;
    for (const auto& point : points) {
        std::uint64_t seq_len = 0;
        for (const auto& s : point.run.task.eval) seq_len = std::max<std::uint64_t>(seq_len, s.seq_len);
        for (const auto seed : seeds) {
            RunConfig run = point.run;
            run.seed = seed;
            Model model(run.model, seed);
            const auto result = train_mqar(model, run);
            SweepRow row;
            row.label = point.label;
            row.model_kind = to_string(run.model.kind);
            row.partitions = run.model.kind == MixerKind::ramnet ? run.model.partitions : 0;
            row.capacity = run.model.kind == MixerKind::ramnet ? run.model.decoder().capacity() : 0;
            row.seed = seed;
            row.state_size = model_state_size(run.model, seq_len);
            row.accuracy = result.final_eval.aggregate;
            row.parameters = model.parameter_count(false);
            if (on_row) on_row(row);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::vector<PlotRow> plot_rows(std::span<const SweepRow> rows) {
    std::vector<PlotRow> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back({r.state_size, r.accuracy, r.model_kind});
    return out;
}

void write_sweep_jsonl(const std::filesystem::path& path, std::span<const SweepRow> rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& r : rows) {
        const json j = {{"label", r.label},           {"model_kind", r.model_kind},
                        {"partitions", r.partitions}, {"capacity", r.capacity},
                        {"seed", r.seed},             {"state_size", r.state_size},
                        {"accuracy", r.accuracy},     {"parameters", r.parameters}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<SweepRow> read_sweep_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<SweepRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = json::parse(line);
            SweepRow r;
            j.at("label").get_to(r.label);
            j.at("model_kind").get_to(r.model_kind);
            j.at("partitions").get_to(r.partitions);
            j.at("capacity").get_to(r.capacity);
            j.at("seed").get_to(r.seed);
            j.at("state_size").get_to(r.state_size);
            j.at("accuracy").get_to(r.accuracy);
            j.at("parameters").get_to(r.parameters);
            rows.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
    }
    return rows;
}

void write_plot_csv(const std::filesystem::path& path, std::span<const PlotRow> rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.precision(17);
    out << "state_size,accuracy,model_kind\n";
    for (const auto& r : rows) out << r.state_size << ',' << r.accuracy << ',' << r.model_kind << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<PlotRow> read_plot_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "state_size,accuracy,model_kind") {
        throw ConfigError(path.string() + ": missing plot header");
    }
    std::vector<PlotRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string a, b, c;
        if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c)) {
            throw ConfigError(path.string() + ": malformed row '" + line + "'");
        }
        try {
            rows.push_back({std::stoull(a), std::stod(b), c});
        } catch (const std::exception&) {
            throw ConfigError(path.string() + ": malformed row '" + line + "'");
        }
    }
    return rows;
}

}  // namespace ramnet
