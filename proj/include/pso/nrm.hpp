#pragma once

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pso/core.hpp"

namespace pso {

struct MemoryEntry {
  Trajectory trajectory;
  double reward = 0.0;     // composite reward at insertion, < tau
  long inserted_at = 0;    // global monotone counter

  bool operator==(const MemoryEntry&) const = default;
};

/// Per-query bounded FIFO store of low-reward trajectories.
class MemoryBank {
 public:
  explicit MemoryBank(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw ConfigError("memory capacity must be positive");
  }

  int capacity() const { return capacity_; }

  /// Stores iff reward < tau (strict). Evicts the oldest entry first when the
  /// per-query list would exceed capacity. Stored trajectories are normalized
  /// to what the snapshot schema carries: once in the bank they are replayed
  /// negatives and their behavior log-prob no longer applies.
  bool maybe_store(const std::string& query_id, const Trajectory& trajectory, double reward,
                   double tau) {
    if (!(reward >= 0.0 && reward <= 1.0)) throw Error("maybe_store: reward out of [0,1]");
    if (!(reward < tau)) return false;
    Trajectory stored = trajectory;
    stored.query_id = query_id;
    stored.source = TrajectorySource::replayed_negative;
    stored.logprob_behavior = 0.0;
    auto& bucket = entries_[query_id];
    bucket.push_back(MemoryEntry{std::move(stored), reward, next_counter_++});
    if (static_cast<int>(bucket.size()) > capacity_) bucket.pop_front();
    return true;
  }

  /// The min(n, size) lowest-reward entries, ascending by reward, older
  /// entries first on ties. Never mutates the bank.
  std::vector<MemoryEntry> retrieve_lowest(const std::string& query_id, int n) const {
    if (n < 0) throw Error("retrieve_lowest: n must be non-negative");
    auto it = entries_.find(query_id);
    if (n == 0 || it == entries_.end()) return {};
    std::vector<MemoryEntry> sorted(it->second.begin(), it->second.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const MemoryEntry& a, const MemoryEntry& b) {
      if (a.reward != b.reward) return a.reward < b.reward;
      return a.inserted_at < b.inserted_at;
    });
    if (static_cast<int>(sorted.size()) > n) sorted.resize(n);
    return sorted;
  }

  std::size_t size(const std::string& query_id) const {
    auto it = entries_.find(query_id);
    return it == entries_.end() ? 0 : it->second.size();
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, bucket] : entries_) n += bucket.size();
    return n;
  }

  /// Path ids currently stored for a query (synthetic mode).
  std::set<int> stored_paths(const std::string& query_id) const {
    std::set<int> out;
    auto it = entries_.find(query_id);
    if (it == entries_.end()) return out;
    for (const auto& e : it->second)
      if (e.trajectory.path_id) out.insert(*e.trajectory.path_id);
    return out;
  }

  const std::map<std::string, std::deque<MemoryEntry>>& buckets() const { return entries_; }

  void persist(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write memory snapshot: " + path);
    // one entry per line, global insertion order
    std::vector<const MemoryEntry*> all;
    for (const auto& [_, bucket] : entries_)
      for (const auto& e : bucket) all.push_back(&e);
    std::sort(all.begin(), all.end(),
              [](const MemoryEntry* a, const MemoryEntry* b) { return a->inserted_at < b->inserted_at; });
    for (const MemoryEntry* e : all) {
      ordered_json rec;
      rec["query_id"] = e->trajectory.query_id;
      rec["inserted_at"] = e->inserted_at;
      rec["reward"] = e->reward;
      rec["think_text"] = e->trajectory.think_text;
      rec["answer_text"] = e->trajectory.answer_text;
      if (e->trajectory.path_id)
        rec["path_id"] = *e->trajectory.path_id;
      else
        rec["path_id"] = nullptr;
      out << rec.dump() << '\n';
    }
  }

  static MemoryBank restore(const std::string& path, int capacity) {
    std::ifstream in(path);
    if (!in) throw Error("memory snapshot not found: " + path);
    MemoryBank bank(capacity);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      MemoryEntry e;
      try {
        json rec = json::parse(line);
        e.trajectory.query_id = rec.at("query_id").get<std::string>();
        e.inserted_at = rec.at("inserted_at").get<long>();
        e.reward = rec.at("reward").get<double>();
        e.trajectory.think_text = rec.at("think_text").get<std::string>();
        e.trajectory.answer_text = rec.at("answer_text").get<std::string>();
        if (!rec.at("path_id").is_null()) e.trajectory.path_id = rec.at("path_id").get<int>();
        e.trajectory.source = TrajectorySource::replayed_negative;
      } catch (const json::exception& ex) {
        throw ParseError("memory snapshot line " + std::to_string(line_no) + ": " + ex.what());
      }
      auto& bucket = bank.entries_[e.trajectory.query_id];
      if (static_cast<int>(bucket.size()) >= capacity)
        throw ParseError("memory snapshot line " + std::to_string(line_no) +
                         ": bucket exceeds capacity");
      bank.next_counter_ = std::max(bank.next_counter_, e.inserted_at + 1);
      bucket.push_back(std::move(e));
    }
    return bank;
  }

 private:
  std::map<std::string, std::deque<MemoryEntry>> entries_;
  long next_counter_ = 0;
  int capacity_;
};

}  // namespace pso
