#pragma once

// Persistent experiment state: an artifact index with provenance edges, and
// per-factorization curation decisions with an append-only change log.

#include <filesystem>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "dermagan/error.hpp"
#include "dermagan/factorization.hpp"

namespace dermagan {

enum class ArtifactKind { checkpoint, factorization, encoder, hypernet, dataset, records, report };

std::string_view to_string(ArtifactKind kind);
ArtifactKind parse_artifact_kind(std::string_view text);

struct ArtifactRecord {
  std::string id;
  ArtifactKind kind = ArtifactKind::report;
  std::string path;  // relative to the store root
  std::string created_at;
  std::vector<std::string> parent_ids;
  nlohmann::json meta = nlohmann::json::object();

  [[nodiscard]] nlohmann::json to_json() const;
  static ArtifactRecord from_json(const nlohmann::json& j);
};

/// Artifact index persisted as <root>/index.json. Parents must exist before a
/// child is added, so the provenance graph is acyclic by construction. All
/// methods are safe to call concurrently; writers are serialized.
class ArtifactStore {
 public:
  /// Opens (or creates) the store. A malformed index raises IoError.
  explicit ArtifactStore(std::filesystem::path root);

  [[nodiscard]] const std::filesystem::path& root() const { return root_; }

  /// Registers an artifact and rewrites the index atomically. `path` may be
  /// absolute (it must lie under the root) or root-relative.
  ArtifactRecord add(const std::string& id, ArtifactKind kind, const std::filesystem::path& path,
                     const std::vector<std::string>& parent_ids,
                     nlohmann::json meta = nlohmann::json::object());

  [[nodiscard]] std::optional<ArtifactRecord> find(const std::string& id) const;
  [[nodiscard]] ArtifactRecord get(const std::string& id) const;
  [[nodiscard]] bool contains(const std::string& id) const;
  [[nodiscard]] std::vector<ArtifactRecord> list() const;
  [[nodiscard]] std::vector<ArtifactRecord> list(ArtifactKind kind) const;
  /// Most recently added artifact of a kind.
  [[nodiscard]] std::optional<ArtifactRecord> latest(ArtifactKind kind) const;
  /// Transitive parents of `id`, nearest first, without repeats.
  [[nodiscard]] std::vector<ArtifactRecord> ancestors(const std::string& id) const;
  [[nodiscard]] std::filesystem::path absolute(const ArtifactRecord& record) const;

  [[nodiscard]] nlohmann::json to_json() const;

 private:
  void write_index() const;

  std::filesystem::path root_;
  mutable std::shared_mutex mutex_;
  std::vector<ArtifactRecord> records_;
};

struct CurationEntry {
  int index = 0;
  std::string name;
  DirectionStatus status = DirectionStatus::unreviewed;
  std::optional<int> duplicate_of;
  std::string notes;
  std::string reviewed_at;

  [[nodiscard]] nlohmann::json to_json() const;
  static CurationEntry from_json(const nlohmann::json& j);
  bool operator==(const CurationEntry&) const = default;
};

struct CurationUpdate {
  int index = 0;
  DirectionStatus status = DirectionStatus::unreviewed;
  std::optional<std::string> name;
  std::optional<int> duplicate_of;
  std::optional<std::string> notes;

  static CurationUpdate from_json(const nlohmann::json& j);
};

/// Raised when an update would break a curation invariant (for example a
/// duplicate pointing at a direction that is not relevant).
class CurationConflict : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// Curation decisions for one factorization, stored as <dir>/curation.json
/// plus <dir>/curation_log.jsonl (one line per status change).
class CurationState {
 public:
  CurationState(std::filesystem::path dir, std::string factorization_id, int n_directions);

  /// Applies an update. Returns false (and writes nothing) when the entry
  /// already holds exactly these values.
  bool apply(const CurationUpdate& update);

  [[nodiscard]] std::vector<CurationEntry> entries() const;
  [[nodiscard]] CurationEntry entry(int index) const;
  [[nodiscard]] std::size_t log_size() const;
  [[nodiscard]] const std::string& factorization_id() const { return factorization_id_; }

  /// Relevant directions of `result`, with their curated names and statuses.
  [[nodiscard]] std::vector<SemanticDirection> relevant(const FactorizationResult& result) const;

 private:
  void save() const;

  std::filesystem::path dir_;
  std::string factorization_id_;
  mutable std::mutex mutex_;
  std::vector<CurationEntry> entries_;
};

/// Current UTC time as an ISO-8601 string.
std::string utc_timestamp();

}  // namespace dermagan
