#ifndef WILOC_H
#define WILOC_H

#include <stddef.h>
#include <stdint.h>

#define WILOC_BUILDING_LEN 64

/**
 * Result of every call.
 */
typedef enum WilocStatus {
  WILOC_STATUS_OK = 0,
  WILOC_STATUS_NULL_ARGUMENT = 1,
  WILOC_STATUS_INVALID_UTF8 = 2,
  WILOC_STATUS_INVALID_ARGUMENT = 3,
  WILOC_STATUS_IO = 4,
  WILOC_STATUS_CORRUPT_DATABASE = 5,
  WILOC_STATUS_NOT_LOCALIZABLE = 6,
  WILOC_STATUS_PANIC = 7,
} WilocStatus;

typedef enum WilocBand {
  WILOC_BAND_GHZ24 = 0,
  WILOC_BAND_GHZ5 = 1,
} WilocBand;

typedef enum WilocHeuristic {
  WILOC_HEURISTIC_BASELINE = 0,
  WILOC_HEURISTIC_MAX_AP_COUNT = 1,
  WILOC_HEURISTIC_MAX_RSSI_FLOOR = 2,
  WILOC_HEURISTIC_ASSOCIATION_FLOOR = 3,
} WilocHeuristic;

typedef enum WilocFrameClass {
  WILOC_FRAME_CLASS_SCANNING = 0,
  WILOC_FRAME_CLASS_NON_SCANNING = 1,
} WilocFrameClass;

/**
 * A loaded fingerprint database.
 */
typedef struct WilocDb WilocDb;

/**
 * An online fingerprint under construction for one client and band.
 */
typedef struct WilocOnline WilocOnline;

/**
 * A location estimate. `building` is NUL-terminated and truncated to fit.
 */
typedef struct WilocEstimate {
  char building[WILOC_BUILDING_LEN];
  int32_t floor;
  uint32_t landmark_index;
  double x_m;
  double y_m;
  /**
   * Distance in signal space, dB.
   */
  double score;
  uint32_t cardinality_used;
  uint32_t matched_ap_count;
  enum WilocHeuristic heuristic;
  enum WilocHeuristic requested_heuristic;
  /**
   * Nonzero when the requested heuristic fell back to Baseline.
   */
  uint8_t fell_back;
} WilocEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` as a
 * NUL-terminated string. Returns the length the full message needs,
 * including the NUL; nothing is written when `buf` is null.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t wiloc_last_error(char *buf, size_t len);

/**
 * Load a fingerprint database file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WilocStatus wiloc_db_open(const char *path, struct WilocDb **out);

/**
 * Number of fingerprints in the database, 0 for null.
 *
 * # Safety
 * `db` must be null or a handle from [`wiloc_db_open`].
 */
size_t wiloc_db_len(const struct WilocDb *db);

/**
 * # Safety
 * `db` must be null or a handle from [`wiloc_db_open`] not yet freed.
 */
void wiloc_db_free(struct WilocDb *db);

/**
 * Start an online fingerprint for a client, given as its 40-hex hash.
 *
 * # Safety
 * `client_id` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WilocStatus wiloc_online_new(const char *client_id,
                                  enum WilocBand band,
                                  struct WilocOnline **out);

/**
 * Add one observation of `ap_mac`. Repeated observations are averaged.
 *
 * # Safety
 * `online` must be a live handle and `ap_mac` a NUL-terminated string.
 */
enum WilocStatus wiloc_online_add(struct WilocOnline *online, const char *ap_mac, int16_t rssi_dbm);

/**
 * Set the AP the client is associated with; null clears it.
 *
 * # Safety
 * `online` must be a live handle and `ap_mac` null or a NUL-terminated
 * string.
 */
enum WilocStatus wiloc_online_set_assoc(struct WilocOnline *online, const char *ap_mac);

/**
 * # Safety
 * `online` must be null or a handle from [`wiloc_online_new`] not yet
 * freed.
 */
void wiloc_online_free(struct WilocOnline *online);

/**
 * Localize an online fingerprint. Heuristics that cannot apply fall back
 * to Baseline and set `fell_back`.
 *
 * # Safety
 * `db` and `online` must be live handles and `out` a valid pointer.
 */
enum WilocStatus wiloc_localize(const struct WilocDb *db,
                                const struct WilocOnline *online,
                                enum WilocHeuristic heuristic,
                                struct WilocEstimate *out);

/**
 * Number of distinct APs observed so far, 0 for null.
 *
 * # Safety
 * `online` must be null or a live handle.
 */
size_t wiloc_online_cardinality(const struct WilocOnline *online);

/**
 * Parse one feed line, apply the default age and signal thresholds and
 * classify it. `*kept` is 0 when the thresholds drop the record.
 *
 * # Safety
 * `line` must be a NUL-terminated string; `class` and `kept` valid
 * pointers.
 */
enum WilocStatus wiloc_classify_line(const char *line, enum WilocFrameClass *class_, uint8_t *kept);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WILOC_H */
