#include "promptedit/promptedit.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "promptedit/edit_space.hpp"
#include "promptedit/error.hpp"
#include "promptedit/harness.hpp"
#include "promptedit/scoring.hpp"

struct pe_session {
  promptedit::Session session;
};

namespace {

thread_local std::string g_last_error;

pe_status to_status(promptedit::ErrorCode code) {
  return static_cast<pe_status>(static_cast<int>(code) + 1);
}

template <typename F>
pe_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return PE_OK;
  } catch (const promptedit::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PE_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PE_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown exception";
    return PE_ERR_INTERNAL;
  }
}

pe_status invalid(const char* what) {
  g_last_error = what;
  return PE_ERR_INVALID_ARGUMENT;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* pe_version(void) { return "0.1.0"; }

const char* pe_status_string(pe_status status) {
  if (status == PE_OK) return "ok";
  if (status == PE_ERR_INVALID_ARGUMENT) return "InvalidArgument";
  if (status == PE_ERR_INTERNAL) return "Internal";
  const int code = static_cast<int>(status) - 1;
  if (code < 0 || code > static_cast<int>(promptedit::ErrorCode::IoError)) return "Unknown";
  return promptedit::to_string(static_cast<promptedit::ErrorCode>(code));
}

const char* pe_last_error(void) { return g_last_error.c_str(); }

void pe_string_free(char* s) { std::free(s); }

pe_status pe_default_config(char** out_json) {
  if (!out_json) return invalid("out_json is NULL");
  return guarded([&] { *out_json = dup_string(promptedit::run_config_to_json({})); });
}

pe_status pe_session_create(const char* config_json, pe_session** out) {
  if (!out) return invalid("out is NULL");
  *out = nullptr;
  return guarded([&] {
    promptedit::RunConfig cfg;
    if (config_json && *config_json) cfg = promptedit::parse_run_config(config_json);
    *out = new pe_session{promptedit::Session(std::move(cfg))};
  });
}

void pe_session_destroy(pe_session* session) { delete session; }

pe_status pe_session_config(const pe_session* session, char** out_json) {
  if (!session || !out_json) return invalid("session or out_json is NULL");
  return guarded([&] { *out_json = dup_string(promptedit::run_config_to_json(session->session.config())); });
}

pe_status pe_session_train(pe_session* session, const char* out_dir, char** out_summary) {
  if (!session || !out_dir || !out_summary) return invalid("session, out_dir or out_summary is NULL");
  return guarded([&] { *out_summary = dup_string(session->session.run_train(out_dir)); });
}

pe_status pe_session_evaluate(pe_session* session, const char* checkpoint, const char* out_dir,
                              char** out_summary) {
  if (!session || !checkpoint || !out_dir || !out_summary)
    return invalid("session, checkpoint, out_dir or out_summary is NULL");
  return guarded([&] { *out_summary = dup_string(session->session.run_evaluate(checkpoint, out_dir)); });
}

pe_status pe_session_baseline(pe_session* session, const char* kind, const char* out_dir,
                              char** out_summary) {
  if (!session || !kind || !out_dir || !out_summary)
    return invalid("session, kind, out_dir or out_summary is NULL");
  return guarded([&] {
    *out_summary = dup_string(
        session->session.run_baseline(promptedit::parse_baseline_kind(kind), out_dir));
  });
}

pe_status pe_session_inspect(pe_session* session, const char* query, const char* checkpoint,
                             char** out_json) {
  if (!session || !query || !out_json) return invalid("session, query or out_json is NULL");
  return guarded([&] {
    std::optional<std::filesystem::path> ckpt;
    if (checkpoint && *checkpoint) ckpt = checkpoint;
    *out_json = dup_string(session->session.inspect_prompt(query, ckpt));
  });
}

pe_status pe_count_actions(size_t l, size_t n, size_t pool, size_t verbalizers, size_t* instruction,
                           size_t* exemplar, size_t* verbalizer) {
  if (!instruction || !exemplar || !verbalizer) return invalid("output pointer is NULL");
  return guarded([&] {
    const auto c = promptedit::count_actions(l, n, pool, verbalizers);
    *instruction = c.instruction;
    *exemplar = c.exemplar;
    *verbalizer = c.verbalizer;
  });
}

pe_status pe_compute_score(const double* log_probs, size_t num_labels, size_t correct,
                           double lambda1, double lambda2, double* out) {
  if (!log_probs || !out) return invalid("log_probs or out is NULL");
  return guarded([&] {
    *out = promptedit::compute_score(std::span<const double>(log_probs, num_labels), correct,
                                     promptedit::ScoreWeights{lambda1, lambda2});
  });
}

}  // extern "C"
