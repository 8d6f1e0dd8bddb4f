#include "dermagan/store.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "dermagan/archive.hpp"

namespace dermagan {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kKindNames[] = {"checkpoint", "factorization", "encoder", "hypernet",
                                           "dataset",    "records",       "report"};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string_view to_string(ArtifactKind kind) { return kKindNames[static_cast<int>(kind)]; }

ArtifactKind parse_artifact_kind(std::string_view text) {
  for (int i = 0; i < 7; ++i)
    if (kKindNames[i] == text) return static_cast<ArtifactKind>(i);
  throw InvalidArgument("unknown artifact kind '" + std::string(text) + "'");
}

json ArtifactRecord::to_json() const {
  return {{"artifact_id", id},        {"kind", std::string(dermagan::to_string(kind))},
          {"path", path},             {"created_at", created_at},
          {"parent_ids", parent_ids}, {"meta", meta}};
}

ArtifactRecord ArtifactRecord::from_json(const json& j) {
  ArtifactRecord r;
  r.id = j.at("artifact_id").get<std::string>();
  r.kind = parse_artifact_kind(j.at("kind").get<std::string>());
  r.path = j.at("path").get<std::string>();
  r.created_at = j.value("created_at", "");
  r.parent_ids = j.value("parent_ids", std::vector<std::string>{});
  r.meta = j.value("meta", json::object());
  return r;
}

ArtifactStore::ArtifactStore(fs::path root) : root_(fs::absolute(std::move(root)).lexically_normal()) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw IoError("cannot create store root " + root_.string());
  const auto index = root_ / "index.json";
  if (!fs::exists(index)) {
    write_index();
    return;
  }
  try {
    const auto j = json::parse(read_file(index));
    std::set<std::string> seen;
    for (const auto& a : j.at("artifacts")) {
      auto r = ArtifactRecord::from_json(a);
      for (const auto& p : r.parent_ids)
        if (!seen.count(p)) throw IoError("artifact '" + r.id + "' references unknown parent '" + p + "'");
      if (!seen.insert(r.id).second) throw IoError("duplicate artifact id '" + r.id + "'");
      records_.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw IoError("corrupt index " + index.string() + ": " + e.what());
  } catch (const Error& e) {
    throw IoError("corrupt index " + index.string() + ": " + e.what());
  }
}

void ArtifactStore::write_index() const {
  json arr = json::array();
  for (const auto& r : records_) arr.push_back(r.to_json());
  atomic_write(root_ / "index.json", json{{"artifacts", arr}}.dump(2) + "\n");
}

ArtifactRecord ArtifactStore::add(const std::string& id, ArtifactKind kind, const fs::path& path,
                                  const std::vector<std::string>& parent_ids, json meta) {
  if (id.empty()) throw InvalidArgument("artifact id must not be empty");
  std::unique_lock lock(mutex_);
  for (const auto& r : records_)
    if (r.id == id) throw InvalidArgument("artifact id '" + id + "' already exists");
  for (const auto& p : parent_ids) {
    bool found = false;
    for (const auto& r : records_) found = found || r.id == p;
    if (!found) throw InvalidArgument("unknown parent artifact '" + p + "'");
  }
  auto rel = path.is_absolute() ? fs::absolute(path).lexically_normal().lexically_relative(root_) : path;
  if (rel.empty() || *rel.begin() == "..")
    throw InvalidArgument("artifact path " + path.string() + " is outside the store");
  ArtifactRecord r{id, kind, rel.generic_string(), utc_timestamp(), parent_ids, std::move(meta)};
  records_.push_back(r);
  write_index();
  return r;
}

std::optional<ArtifactRecord> ArtifactStore::find(const std::string& id) const {
  std::shared_lock lock(mutex_);
  for (const auto& r : records_)
    if (r.id == id) return r;
  return std::nullopt;
}

ArtifactRecord ArtifactStore::get(const std::string& id) const {
  auto r = find(id);
  if (!r) throw InvalidArgument("unknown artifact '" + id + "'");
  return *r;
}

bool ArtifactStore::contains(const std::string& id) const { return find(id).has_value(); }

std::vector<ArtifactRecord> ArtifactStore::list() const {
  std::shared_lock lock(mutex_);
  return records_;
}

std::vector<ArtifactRecord> ArtifactStore::list(ArtifactKind kind) const {
  std::shared_lock lock(mutex_);
  std::vector<ArtifactRecord> out;
  for (const auto& r : records_)
    if (r.kind == kind) out.push_back(r);
  return out;
}

std::optional<ArtifactRecord> ArtifactStore::latest(ArtifactKind kind) const {
  std::shared_lock lock(mutex_);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it)
    if (it->kind == kind) return *it;
  return std::nullopt;
}

std::vector<ArtifactRecord> ArtifactStore::ancestors(const std::string& id) const {
  std::vector<ArtifactRecord> out;
  std::set<std::string> seen{id};
  std::vector<std::string> frontier = get(id).parent_ids;
  while (!frontier.empty()) {
    std::vector<std::string> next;
    for (const auto& p : frontier) {
      if (!seen.insert(p).second) continue;
      auto r = get(p);
      next.insert(next.end(), r.parent_ids.begin(), r.parent_ids.end());
      out.push_back(std::move(r));
    }
    frontier = std::move(next);
  }
  return out;
}

fs::path ArtifactStore::absolute(const ArtifactRecord& record) const { return root_ / record.path; }

json ArtifactStore::to_json() const {
  std::shared_lock lock(mutex_);
  json arr = json::array();
  for (const auto& r : records_) arr.push_back(r.to_json());
  return arr;
}

// ---------------------------------------------------------------------------

json CurationEntry::to_json() const {
  return {{"index", index},
          {"name", name},
          {"status", std::string(dermagan::to_string(status))},
          {"duplicate_of", duplicate_of ? json(*duplicate_of) : json(nullptr)},
          {"notes", notes},
          {"reviewed_at", reviewed_at.empty() ? json(nullptr) : json(reviewed_at)}};
}

CurationEntry CurationEntry::from_json(const json& j) {
  CurationEntry e;
  e.index = j.at("index").get<int>();
  e.name = j.value("name", "");
  e.status = parse_direction_status(j.at("status").get<std::string>());
  if (j.contains("duplicate_of") && !j.at("duplicate_of").is_null()) e.duplicate_of = j.at("duplicate_of").get<int>();
  e.notes = j.value("notes", "");
  if (j.contains("reviewed_at") && !j.at("reviewed_at").is_null()) e.reviewed_at = j.at("reviewed_at").get<std::string>();
  return e;
}

CurationUpdate CurationUpdate::from_json(const json& j) {
  CurationUpdate u;
  try {
    u.index = j.at("index").get<int>();
    u.status = parse_direction_status(j.at("status").get<std::string>());
    if (j.contains("name") && !j.at("name").is_null()) u.name = j.at("name").get<std::string>();
    if (j.contains("duplicate_of") && !j.at("duplicate_of").is_null()) u.duplicate_of = j.at("duplicate_of").get<int>();
    if (j.contains("notes") && !j.at("notes").is_null()) u.notes = j.at("notes").get<std::string>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed curation update: ") + e.what());
  }
  return u;
}

CurationState::CurationState(fs::path dir, std::string factorization_id, int n_directions)
    : dir_(std::move(dir)), factorization_id_(std::move(factorization_id)) {
  if (n_directions < 1) throw InvalidArgument("curation: need at least one direction");
  std::error_code ec;
  fs::create_directories(dir_, ec);
  const auto file = dir_ / "curation.json";
  if (fs::exists(file)) {
    json j;
    try {
      j = json::parse(read_file(file));
    } catch (const json::exception& e) {
      throw IoError("corrupt curation state " + file.string() + ": " + e.what());
    }
    if (j.value("factorization_id", "") != factorization_id_)
      throw InvalidArgument("curation state belongs to factorization '" + j.value("factorization_id", "") + "'");
    for (const auto& e : j.at("directions")) entries_.push_back(CurationEntry::from_json(e));
    if (static_cast<int>(entries_.size()) != n_directions)
      throw InvalidArgument("curation state has " + std::to_string(entries_.size()) + " directions, expected " +
                            std::to_string(n_directions));
    return;
  }
  for (int i = 0; i < n_directions; ++i) {
    CurationEntry e;
    e.index = i;
    entries_.push_back(e);
  }
  save();
}

void CurationState::save() const {
  json arr = json::array();
  for (const auto& e : entries_) arr.push_back(e.to_json());
  atomic_write(dir_ / "curation.json",
               json{{"factorization_id", factorization_id_}, {"directions", arr}}.dump(2) + "\n");
}

bool CurationState::apply(const CurationUpdate& u) {
  std::lock_guard lock(mutex_);
  const int n = static_cast<int>(entries_.size());
  if (u.index < 0 || u.index >= n) throw InvalidArgument("curation: direction index out of range");
  if (u.status == DirectionStatus::duplicate) {
    if (!u.duplicate_of) throw InvalidArgument("curation: duplicate requires duplicate_of");
    if (*u.duplicate_of < 0 || *u.duplicate_of >= n) throw InvalidArgument("curation: duplicate_of out of range");
    if (*u.duplicate_of == u.index) throw CurationConflict("curation: a direction cannot duplicate itself");
    if (entries_[*u.duplicate_of].status != DirectionStatus::relevant)
      throw CurationConflict("curation: duplicate_of must point to a relevant direction");
  } else if (u.duplicate_of) {
    throw InvalidArgument("curation: duplicate_of is only valid with status duplicate");
  }
  const auto& current = entries_[u.index];
  if (current.status == DirectionStatus::relevant && u.status != DirectionStatus::relevant)
    for (const auto& e : entries_)
      if (e.duplicate_of == u.index)
        throw CurationConflict("curation: direction " + std::to_string(e.index) + " is a duplicate of " +
                               std::to_string(u.index));

  CurationEntry next = current;
  next.status = u.status;
  next.duplicate_of = u.duplicate_of;
  if (u.name) next.name = *u.name;
  if (u.notes) next.notes = *u.notes;
  auto comparable = next;
  comparable.reviewed_at = current.reviewed_at;
  if (comparable == current) return false;

  next.reviewed_at = utc_timestamp();
  json line{{"index", u.index},
            {"from", std::string(to_string(current.status))},
            {"to", std::string(to_string(next.status))},
            {"name", next.name},
            {"duplicate_of", next.duplicate_of ? json(*next.duplicate_of) : json(nullptr)},
            {"at", next.reviewed_at}};
  {
    std::ofstream log(dir_ / "curation_log.jsonl", std::ios::app);
    if (!log) throw IoError("cannot append to curation log in " + dir_.string());
    log << line.dump() << '\n';
  }
  entries_[u.index] = std::move(next);
  save();
  return true;
}

std::vector<CurationEntry> CurationState::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

CurationEntry CurationState::entry(int index) const {
  std::lock_guard lock(mutex_);
  if (index < 0 || index >= static_cast<int>(entries_.size()))
    throw InvalidArgument("curation: direction index out of range");
  return entries_[index];
}

std::size_t CurationState::log_size() const {
  std::lock_guard lock(mutex_);
  std::ifstream in(dir_ / "curation_log.jsonl");
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

std::vector<SemanticDirection> CurationState::relevant(const FactorizationResult& result) const {
  std::vector<SemanticDirection> out;
  for (const auto& e : entries()) {
    if (e.status != DirectionStatus::relevant) continue;
    auto d = direction_at(result, e.index);
    d.status = e.status;
    if (!e.name.empty()) d.name = e.name;
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace dermagan
