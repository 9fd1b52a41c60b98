#include <fstream>
#include <list>
#include <unordered_map>

#include "ramnet/harness.hpp"

namespace ramnet {

using nlohmann::json;

std::vector<TraceEvent> record_trace(const Model& model, std::span<const int> tokens) {
    if (model.config().kind != MixerKind::ramnet) {
        throw ConfigError("trace: only RAM-Net models have slot accesses");
    }
    std::vector<TraceEvent> events;
    Tape tape;
    GradBuffer scratch;
    ForwardOptions opts;
    opts.trace = &events;
    opts.engine = Engine::sequential;
    (void)model.forward(tape, scratch, tokens, opts);
    return events;
}

void write_trace(const std::filesystem::path& path, std::span<const TraceEvent> events) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& e : events) {
        const json j = {{"t", e.t},
                        {"layer", e.layer},
                        {"head", e.head},
                        {"kind", e.kind == AccessKind::read ? "read" : "write"},
                        {"slot", e.slot},
                        {"weight", e.weight}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<TraceEvent> read_trace(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open trace " + path.string());
    std::vector<TraceEvent> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = json::parse(line);
            TraceEvent e;
            e.t = j.at("t").get<std::int64_t>();
            e.layer = j.at("layer").get<int>();
            e.head = j.at("head").get<int>();
            const auto kind = j.at("kind").get<std::string>();
            if (kind == "read") e.kind = AccessKind::read;
            else if (kind == "write") e.kind = AccessKind::write;
            else throw ConfigError("kind must be read or write");
            e.slot = j.at("slot").get<Slot>();
            e.weight = j.at("weight").get<double>();
            out.push_back(e);
        } catch (const json::exception& ex) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        } catch (const ConfigError& ex) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    validate_trace(out);
    return out;
}

void validate_trace(std::span<const TraceEvent> events) {
    std::map<std::pair<int, int>, std::int64_t> last;
    for (const auto& e : events) {
        const auto key = std::make_pair(e.layer, e.head);
        const auto it = last.find(key);
        if (it != last.end() && e.t < it->second) {
            throw ConfigError("trace: t decreases within layer " + std::to_string(e.layer) + " head " +
                              std::to_string(e.head));
        }
        last[key] = e.t;
    }
}

std::vector<HeatCell> trace_heatmap(std::span<const TraceEvent> events) {
    std::map<std::tuple<int, int, Slot, std::int64_t>, HeatCell> cells;
    for (const auto& e : events) {
        auto& c = cells[{e.layer, e.head, e.slot, e.t}];
        c.layer = e.layer;
        c.head = e.head;
        c.slot = e.slot;
        c.t = e.t;
        if (e.kind == AccessKind::read) ++c.reads;
        else ++c.writes;
    }
    std::vector<HeatCell> out;
    out.reserve(cells.size());
    for (const auto& [_, c] : cells) out.push_back(c);
    return out;
}

void write_heatmap_csv(const std::filesystem::path& path, std::span<const HeatCell> cells) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "layer,head,slot,t,reads,writes\n";
    for (const auto& c : cells) {
        out << c.layer << ',' << c.head << ',' << c.slot << ',' << c.t << ',' << c.reads << ','
            << c.writes << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

void CacheSimConfig::validate() const {
    if (capacity < 1) throw ConfigError("cache: capacity must be at least 1");
    if (policy != "lru") throw ConfigError("cache: unsupported policy '" + policy + "'");
}

json CacheReport::to_json() const {
    json hist = json::array();
    for (const auto& [key, n] : touches) {
        const auto& [layer, head, slot] = key;
        hist.push_back({{"layer", layer}, {"head", head}, {"slot", slot}, {"touches", n}});
    }
    return {{"accesses", accesses}, {"hits", hits},           {"misses", misses},
            {"cold_misses", cold_misses}, {"evictions", evictions}, {"hit_rate", hit_rate()},
            {"histogram", hist}};
}

CacheReport simulate_cache(std::span<const TraceEvent> events, const CacheSimConfig& cfg) {
    cfg.validate();
    using Key = std::uint64_t;
    const auto key_of = [](const TraceEvent& e) {
        return (static_cast<Key>(static_cast<std::uint16_t>(e.layer)) << 48) |
               (static_cast<Key>(static_cast<std::uint16_t>(e.head)) << 32) | e.slot;
    };
    CacheReport r;
    std::list<Key> recency;  // front = most recent
    std::unordered_map<Key, std::list<Key>::iterator> where;
    std::unordered_map<Key, bool> seen;
    for (const auto& e : events) {
        if (cfg.layer && e.layer != *cfg.layer) continue;
        if (cfg.head && e.head != *cfg.head) continue;
        const Key k = key_of(e);
        ++r.accesses;
        ++r.touches[{e.layer, e.head, e.slot}];
        const auto it = where.find(k);
        if (it != where.end()) {
            ++r.hits;
            recency.splice(recency.begin(), recency, it->second);
            continue;
        }
        ++r.misses;
        if (!seen[k]) {
            ++r.cold_misses;
            seen[k] = true;
        }
        if (recency.size() == cfg.capacity) {
            where.erase(recency.back());
            recency.pop_back();
            ++r.evictions;
        }
        recency.push_front(k);
        where[k] = recency.begin();
    }
    return r;
}

}  // namespace ramnet
