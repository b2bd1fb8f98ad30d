#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtp/eval.hpp"
#include "mtp/forensics.hpp"
#include "mtp/poison.hpp"
#include "mtp/recovery.hpp"
#include "mtp/textgen.hpp"
#include "mtp/tinylm.hpp"

namespace mtp {

namespace fs = std::filesystem;

/// Base for checkpoint file errors.
class CheckpointError : public FormatError {
public:
    using FormatError::FormatError;
};

class BadMagic : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class UnsupportedVersion : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class Truncated : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

class ShapeMismatch : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Checkpoint byte layout, all integers little-endian:
///
///     "PLCK" | u32 version | u32 tensor count
///     per tensor: u32 name length | name | u32 rank | u64 dims[rank] | f32 data
///     u32 metadata length | metadata (key=value lines)
std::string encode_checkpoint(const Checkpoint& ckpt);
/// `expected`, when given, must equal the config recorded in the file.
Checkpoint decode_checkpoint(std::string_view bytes, const std::optional<ModelConfig>& expected = std::nullopt);

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path, const std::optional<ModelConfig>& expected = std::nullopt);

struct CorpusFile {
    Vocabulary vocab;
    Corpus corpus;
};

/// One JSON object per line: a header with the vocabulary, then each task
/// record followed by its instances.
std::string encode_corpus(const Corpus& corpus, const Vocabulary& vocab);
CorpusFile decode_corpus(std::string_view text);

void save_corpus(const Corpus& corpus, const Vocabulary& vocab, const fs::path& path);
CorpusFile load_corpus(const fs::path& path);

std::string encode_plan(const PoisonPlan& plan);
PoisonPlan decode_plan(std::string_view text);

void save_plan(const PoisonPlan& plan, const fs::path& path);
PoisonPlan load_plan(const fs::path& path);

/// "12.50": two decimals, '.' separator.
std::string format_percent(double value);
/// Shortest decimal that round-trips the double.
std::string format_real(double value);

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string to_tsv() const;
};

Table eval_table(const EvalReport& report);
Table diff_table(const DiffReport& report);
Table recovery_table(std::span<const RecoveryReport> reports);

void write_report(const Table& table, const fs::path& path);

/// Writes through a sibling temp file and renames it into place.
void write_file_atomic(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

}  // namespace mtp
