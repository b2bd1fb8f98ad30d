#include "mtp/store.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

#include "json.hpp"

namespace mtp {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'P', 'L', 'C', 'K'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n, const std::string& what) {
        if (bytes_.size() - pos_ < n) {
            throw Truncated("checkpoint truncated while reading " + what + " at byte " + std::to_string(pos_) +
                            " (need " + std::to_string(n) + ", have " + std::to_string(bytes_.size() - pos_) + ")");
        }
        auto out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::uint32_t u32(const std::string& what) {
        const auto b = take(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        return v;
    }

    std::uint64_t u64(const std::string& what) {
        const auto b = take(8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        return v;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::string encode_meta(const Checkpoint& ckpt) {
    const auto& c = ckpt.config();
    std::ostringstream os;
    os << "seed=" << ckpt.meta.seed << "\n"
       << "step=" << ckpt.meta.step << "\n"
       << "provenance=" << to_string(ckpt.meta.provenance) << "\n"
       << "vocab_size=" << c.vocab_size << "\n"
       << "d_model=" << c.d_model << "\n"
       << "n_layers=" << c.n_layers << "\n"
       << "n_heads=" << c.n_heads << "\n"
       << "d_ff=" << c.d_ff << "\n"
       << "max_seq_len=" << c.max_seq_len << "\n";
    return os.str();
}

std::uint64_t parse_u64(std::string_view s, std::string_view key) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw CheckpointError("checkpoint metadata: bad value '" + std::string(s) + "' for " + std::string(key));
    }
    return v;
}

std::string shape_string(const std::vector<std::uint64_t>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
    return s + "]";
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(ckpt.size()));
    for (std::size_t i = 0; i < ckpt.size(); ++i) {
        const auto& spec = ckpt.layout()[i];
        put_u32(out, static_cast<std::uint32_t>(spec.name.size()));
        out += spec.name;
        put_u32(out, static_cast<std::uint32_t>(spec.shape.size()));
        for (auto d : spec.shape) put_u64(out, d);
        const auto& t = ckpt.tensor(i);
        for (Eigen::Index k = 0; k < t.size(); ++k) put_u32(out, std::bit_cast<std::uint32_t>(t.data()[k]));
    }
    const std::string meta = encode_meta(ckpt);
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::optional<ModelConfig>& expected) {
    Reader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw BadMagic("bad magic: not a PLCK checkpoint");
    }
    r.take(4, "magic");
    const auto version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw UnsupportedVersion("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = r.u32("tensor count");

    struct Raw {
        std::string name;
        std::vector<std::uint64_t> dims;
        std::string_view data;
    };
    std::vector<Raw> raws;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string where = "tensor " + std::to_string(i);
        Raw raw;
        raw.name = std::string(r.take(r.u32(where + " name length"), where + " name"));
        const auto rank = r.u32(where + " rank");
        if (rank < 1 || rank > 2) throw ShapeMismatch("tensor '" + raw.name + "' has rank " + std::to_string(rank));
        std::uint64_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            raw.dims.push_back(r.u64(where + " dims"));
            numel *= raw.dims.back();
        }
        if (numel > r.remaining() / 4) {
            throw Truncated("checkpoint truncated in tensor '" + raw.name + "': " + std::to_string(numel) +
                            " floats declared, " + std::to_string(r.remaining()) + " bytes left");
        }
        raw.data = r.take(static_cast<std::size_t>(numel) * 4, "tensor '" + raw.name + "' data");
        raws.push_back(std::move(raw));
    }
    const auto meta_text = r.take(r.u32("metadata length"), "metadata");

    std::map<std::string, std::string, std::less<>> kv;
    std::istringstream is{std::string(meta_text)};
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw CheckpointError("checkpoint metadata line without '=': " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](std::string_view key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw CheckpointError("checkpoint metadata missing '" + std::string(key) + "'");
        return it->second;
    };
    ModelConfig config;
    config.vocab_size = parse_u64(get("vocab_size"), "vocab_size");
    config.d_model = parse_u64(get("d_model"), "d_model");
    config.n_layers = parse_u64(get("n_layers"), "n_layers");
    config.n_heads = parse_u64(get("n_heads"), "n_heads");
    config.d_ff = parse_u64(get("d_ff"), "d_ff");
    config.max_seq_len = parse_u64(get("max_seq_len"), "max_seq_len");
    try {
        config.validate();
    } catch (const InvalidArgument& e) {
        throw CheckpointError(std::string("checkpoint records an invalid config: ") + e.what());
    }
    if (expected && !(*expected == config)) {
        throw ShapeMismatch("checkpoint config (vocab " + std::to_string(config.vocab_size) + ", d_model " +
                            std::to_string(config.d_model) + ", layers " + std::to_string(config.n_layers) +
                            ") differs from the expected config (vocab " + std::to_string(expected->vocab_size) +
                            ", d_model " + std::to_string(expected->d_model) + ", layers " +
                            std::to_string(expected->n_layers) + ")");
    }

    Checkpoint ckpt(config);
    if (raws.size() != ckpt.size()) {
        throw ShapeMismatch("checkpoint holds " + std::to_string(raws.size()) + " tensors, config expects " +
                            std::to_string(ckpt.size()));
    }
    for (std::size_t i = 0; i < raws.size(); ++i) {
        const auto& spec = ckpt.layout()[i];
        if (raws[i].name != spec.name) {
            throw ShapeMismatch("tensor " + std::to_string(i) + " is '" + raws[i].name + "', expected '" + spec.name + "'");
        }
        if (raws[i].dims != std::vector<std::uint64_t>(spec.shape.begin(), spec.shape.end())) {
            throw ShapeMismatch("tensor '" + spec.name + "' has shape " + shape_string(raws[i].dims) + ", expected " +
                                shape_string(std::vector<std::uint64_t>(spec.shape.begin(), spec.shape.end())));
        }
        auto& t = ckpt.tensor(i);
        std::memcpy(t.data(), raws[i].data.data(), raws[i].data.size());
    }
    ckpt.meta.seed = parse_u64(get("seed"), "seed");
    ckpt.meta.step = parse_u64(get("step"), "step");
    try {
        ckpt.meta.provenance = model_provenance_from_string(get("provenance"));
    } catch (const FormatError& e) {
        throw CheckpointError(e.what());
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const fs::path& path, const std::optional<ModelConfig>& expected) {
    return decode_checkpoint(read_file(path), expected);
}

// ---- corpus ---------------------------------------------------------------

namespace {

json tokens_json(const TokenSequence& seq) { return json(seq); }

TokenSequence tokens_from(const json& j, const Vocabulary& vocab, const std::string& field) {
    if (!j.is_array()) throw FormatError(field + " must be an array of token ids");
    TokenSequence out;
    for (const auto& v : j) {
        if (!v.is_number_integer()) throw FormatError(field + " must hold integer token ids");
        const auto id = v.get<TokenId>();
        if (!vocab.contains(id)) throw FormatError(field + " holds out-of-vocabulary id " + std::to_string(id));
        out.push_back(id);
    }
    return out;
}

}  // namespace

std::string encode_corpus(const Corpus& corpus, const Vocabulary& vocab) {
    std::vector<std::size_t> pool_sizes;
    for (std::size_t i = 0; i < vocab.pool_count(); ++i) pool_sizes.push_back(vocab.pool(i).size());
    json header = {{"record", "header"},
                   {"format", "mtp-corpus"},
                   {"version", 1},
                   {"tokens", vocab.tokens()},
                   {"sections",
                    {{"template", vocab.template_count()},
                     {"labels", vocab.label_ids().size()},
                     {"pools", pool_sizes},
                     {"filler", vocab.filler_ids().size()},
                     {"trigger", vocab.trigger_ids().size()}}}};
    std::string out = header.dump() + "\n";
    for (const auto& task : corpus.tasks) {
        json examples = json::array();
        for (const auto& ex : task.positive_examples) examples.push_back({{"input", ex.input}, {"label", ex.label}});
        json t = {{"record", "task"},
                  {"task_id", task.task_id},
                  {"definition", tokens_json(task.definition)},
                  {"examples", examples},
                  {"label_set", task.label_set}};
        out += t.dump() + "\n";
        for (const auto& inst : task.instances) {
            json i = {{"record", "instance"},
                      {"task_id", task.task_id},
                      {"input", inst.input},
                      {"label", inst.label},
                      {"provenance", to_string(inst.provenance)},
                      {"trigger_id", inst.trigger_id ? json(*inst.trigger_id) : json(nullptr)}};
            out += i.dump() + "\n";
        }
    }
    return out;
}

CorpusFile decode_corpus(std::string_view text) {
    CorpusFile file;
    bool have_header = false;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = std::min(text.find('\n', pos), text.size());
        const auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.empty()) continue;
        const std::string at = "corpus line " + std::to_string(line_no) + ": ";
        try {
            const json j = json::parse(line);
            const auto record = j.at("record").get<std::string>();
            if (!have_header) {
                if (record != "header") throw FormatError("first record must be the header");
                if (j.at("format") != "mtp-corpus" || j.at("version") != 1) throw FormatError("unsupported corpus format");
                const auto& s = j.at("sections");
                file.vocab = Vocabulary::from_sections(
                    j.at("tokens").get<std::vector<std::string>>(), s.at("template").get<std::size_t>(),
                    s.at("labels").get<std::size_t>(), s.at("pools").get<std::vector<std::size_t>>(),
                    s.at("filler").get<std::size_t>(), s.at("trigger").get<std::size_t>());
                have_header = true;
            } else if (record == "task") {
                Task task;
                task.task_id = j.at("task_id").get<int>();
                for (const auto& t : file.corpus.tasks) {
                    if (t.task_id == task.task_id) throw FormatError("duplicate task id " + std::to_string(task.task_id));
                }
                task.definition = tokens_from(j.at("definition"), file.vocab, "definition");
                const auto& ex = j.at("examples");
                if (!ex.is_array() || ex.size() != 2) throw FormatError("a task needs exactly 2 examples");
                for (std::size_t k = 0; k < 2; ++k) {
                    task.positive_examples[k] = Example{tokens_from(ex[k].at("input"), file.vocab, "example input"),
                                                        ex[k].at("label").get<TokenId>()};
                }
                task.label_set = j.at("label_set").get<std::array<TokenId, 2>>();
                file.corpus.tasks.push_back(std::move(task));
            } else if (record == "instance") {
                if (file.corpus.tasks.empty()) throw FormatError("instance before any task record");
                auto& task = file.corpus.tasks.back();
                if (j.at("task_id").get<int>() != task.task_id) {
                    throw FormatError("instance for task " + std::to_string(j.at("task_id").get<int>()) +
                                      " follows task " + std::to_string(task.task_id));
                }
                Instance inst;
                inst.input = tokens_from(j.at("input"), file.vocab, "input");
                inst.label = j.at("label").get<TokenId>();
                if (!file.vocab.contains(inst.label)) throw FormatError("label id out of vocabulary");
                inst.provenance = provenance_from_string(j.at("provenance").get<std::string>());
                if (!j.at("trigger_id").is_null()) inst.trigger_id = j.at("trigger_id").get<int>();
                task.instances.push_back(std::move(inst));
            } else {
                throw FormatError("unknown record type '" + record + "'");
            }
        } catch (const json::exception& e) {
            throw FormatError(at + e.what());
        } catch (const Error& e) {
            throw FormatError(at + e.what());
        }
    }
    if (!have_header) throw FormatError("corpus file has no header record");
    return file;
}

void save_corpus(const Corpus& corpus, const Vocabulary& vocab, const fs::path& path) {
    write_file_atomic(path, encode_corpus(corpus, vocab));
}

CorpusFile load_corpus(const fs::path& path) { return decode_corpus(read_file(path)); }

// ---- plan -----------------------------------------------------------------

std::string encode_plan(const PoisonPlan& plan) {
    json triggers = json::array();
    for (const auto& tp : plan.triggers) {
        json assignments = json::array();
        for (const auto& a : tp.assignments) assignments.push_back({a.task_id, a.instance_index});
        triggers.push_back({{"trigger_id", tp.trigger.trigger_id},
                            {"tokens", tp.trigger.tokens},
                            {"target_label", tp.trigger.target_label},
                            {"display", tp.trigger.display},
                            {"count", tp.count},
                            {"task_ids", tp.task_ids},
                            {"assignments", assignments}});
    }
    json doc = {{"format", "mtp-plan"},
                {"version", 1},
                {"position", to_string(plan.position)},
                {"seed", plan.seed},
                {"total_instances", plan.total_instances},
                {"warnings", plan.warnings},
                {"triggers", triggers}};
    return doc.dump(2) + "\n";
}

PoisonPlan decode_plan(std::string_view text) {
    try {
        const json doc = json::parse(text);
        if (doc.at("format") != "mtp-plan" || doc.at("version") != 1) throw FormatError("unsupported plan format");
        PoisonPlan plan;
        plan.position = position_policy_from_string(doc.at("position").get<std::string>());
        plan.seed = doc.at("seed").get<std::uint64_t>();
        plan.total_instances = doc.at("total_instances").get<std::size_t>();
        plan.warnings = doc.at("warnings").get<std::vector<std::string>>();
        for (const auto& t : doc.at("triggers")) {
            TriggerPlan tp;
            tp.trigger.trigger_id = t.at("trigger_id").get<int>();
            tp.trigger.tokens = t.at("tokens").get<std::array<TokenId, 2>>();
            tp.trigger.target_label = t.at("target_label").get<TokenId>();
            tp.trigger.display = t.at("display").get<std::string>();
            tp.count = t.at("count").get<std::size_t>();
            tp.task_ids = t.at("task_ids").get<std::vector<int>>();
            for (const auto& a : t.at("assignments")) {
                tp.assignments.push_back({a.at(0).get<int>(), a.at(1).get<std::size_t>()});
            }
            if (tp.assignments.size() != tp.count) {
                throw FormatError("plan trigger " + std::to_string(tp.trigger.trigger_id) + " lists " +
                                  std::to_string(tp.assignments.size()) + " assignments for count " +
                                  std::to_string(tp.count));
            }
            plan.triggers.push_back(std::move(tp));
        }
        return plan;
    } catch (const json::exception& e) {
        throw FormatError(std::string("plan document: ") + e.what());
    }
}

void save_plan(const PoisonPlan& plan, const fs::path& path) { write_file_atomic(path, encode_plan(plan)); }

PoisonPlan load_plan(const fs::path& path) { return decode_plan(read_file(path)); }

// ---- reports --------------------------------------------------------------

std::string format_percent(double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", value);
    return buf;
}

std::string format_real(double value) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    if (ec != std::errc()) throw Error("format_real: conversion failed");
    return std::string(buf, ptr);
}

std::string Table::to_tsv() const {
    auto line = [](const std::vector<std::string>& cells) {
        std::string s;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (cells[i].find_first_of("\t\n") != std::string::npos) {
                throw InvalidArgument("TSV cell contains a tab or newline: '" + cells[i] + "'");
            }
            s += (i ? "\t" : "") + cells[i];
        }
        return s + "\n";
    };
    std::string out = line(header);
    for (const auto& r : rows) {
        if (r.size() != header.size()) throw InvalidArgument("TSV row width differs from header");
        out += line(r);
    }
    return out;
}

Table eval_table(const EvalReport& report) {
    Table t{{"trigger", "variant", "asr", "n"}, {}};
    for (const auto& r : report.rows) t.rows.push_back({r.trigger, r.variant, format_percent(r.asr), std::to_string(r.n)});
    return t;
}

Table diff_table(const DiffReport& report) {
    Table t{{"layer", "l2", "cosine", "params"}, {}};
    for (const auto& r : report.rows) {
        t.rows.push_back({r.layer, format_real(r.l2), format_real(r.cosine), std::to_string(r.params)});
    }
    return t;
}

Table recovery_table(std::span<const RecoveryReport> reports) {
    Table t{{"strategy", "asr", "rp"}, {}};
    for (const auto& r : reports) t.rows.push_back({r.strategy, format_percent(r.asr_after), format_percent(r.rp)});
    return t;
}

void write_report(const Table& table, const fs::path& path) { write_file_atomic(path, table.to_tsv()); }

// ---- files ----------------------------------------------------------------

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        os.flush();
        if (!os) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw IoError("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace mtp
