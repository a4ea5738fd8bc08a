#ifndef DOCOAP_H
#define DOCOAP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DocoapFormat {
  DOCOAP_FORMAT_WIRE = 0,
  DOCOAP_FORMAT_CBOR = 1,
} DocoapFormat;

typedef enum DocoapLinkProfile {
  DOCOAP_LINK_PROFILE_IEEE802154 = 0,
  DOCOAP_LINK_PROFILE_LORAWAN = 1,
} DocoapLinkProfile;

typedef enum DocoapMethod {
  DOCOAP_METHOD_FETCH = 0,
  DOCOAP_METHOD_GET = 1,
  DOCOAP_METHOD_POST = 2,
} DocoapMethod;

/**
 * Outcome of a finished query.
 */
typedef enum DocoapOutcome {
  DOCOAP_OUTCOME_RESOLVED = 0,
  DOCOAP_OUTCOME_FAILED = 1,
} DocoapOutcome;

typedef enum DocoapScheme {
  DOCOAP_SCHEME_DOH_LIKE = 0,
  DOCOAP_SCHEME_EOL_TTLS = 1,
} DocoapScheme;

typedef enum DocoapStatus {
  DOCOAP_STATUS_OK = 0,
  DOCOAP_STATUS_NULL_POINTER = 1,
  DOCOAP_STATUS_INVALID_ARGUMENT = 2,
  DOCOAP_STATUS_BUFFER_TOO_SMALL = 3,
  DOCOAP_STATUS_DECODE = 4,
  /**
   * Nothing to return right now; not an error.
   */
  DOCOAP_STATUS_EMPTY = 5,
  DOCOAP_STATUS_INTERNAL = 6,
} DocoapStatus;

/**
 * Opaque DoC client talking to a single server.
 */
typedef struct DocoapClient DocoapClient;

/**
 * Opaque OSCORE security context.
 */
typedef struct DocoapOscoreContext DocoapOscoreContext;

/**
 * Opaque DoC server answering from a synthetic zone. Peers are
 * identified by caller-chosen 64-bit handles.
 */
typedef struct DocoapServer DocoapServer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread, NUL-terminated and
 * truncated to `cap`. Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be NULL or point to `cap` writable bytes.
 */
size_t docoap_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *docoap_version(void);

/**
 * Encodes a recursion-desired DNS query with ID 0.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must hold `cap` bytes.
 */
enum DocoapStatus docoap_dns_encode_query(const char *name,
                                          uint16_t rtype,
                                          uint8_t *out,
                                          size_t cap,
                                          size_t *written);

/**
 * Converts a wire-format DNS response to its compressed CBOR form.
 *
 * # Safety
 * `wire` must hold `len` bytes; `out` must hold `cap` bytes.
 */
enum DocoapStatus docoap_cbor_compress_response(const uint8_t *wire,
                                                size_t len,
                                                uint8_t *out,
                                                size_t cap,
                                                size_t *written);

/**
 * Number of link-layer frames needed for a `payload`-octet datagram.
 *
 * # Safety
 * `frames` must be a valid pointer.
 */
enum DocoapStatus docoap_fragment_count(size_t payload,
                                        enum DocoapLinkProfile profile,
                                        size_t *frames);

/**
 * Creates a client. `oscore` may be NULL; otherwise requests are
 * protected with that context, which the client takes over. Returns NULL
 * on invalid arguments.
 *
 * # Safety
 * `oscore` must be NULL or a context that is not used afterwards.
 */
struct DocoapClient *docoap_client_new(enum DocoapMethod method,
                                       enum DocoapFormat format,
                                       enum DocoapScheme scheme,
                                       uint64_t seed,
                                       struct DocoapOscoreContext *oscore);

/**
 * # Safety
 * `client` must come from [`docoap_client_new`] and not be used afterwards.
 */
void docoap_client_free(struct DocoapClient *client);

/**
 * Starts resolving `name`; the query ID is stored in `*id`.
 *
 * # Safety
 * `client` must be valid, `name` NUL-terminated, `id` writable.
 */
enum DocoapStatus docoap_client_query(struct DocoapClient *client,
                                      const char *name,
                                      uint16_t rtype,
                                      uint64_t now_ms,
                                      uint64_t *id);

/**
 * Next datagram for the server, or `DOCOAP_STATUS_EMPTY`.
 *
 * # Safety
 * `client` must be valid; `out` must hold `cap` bytes.
 */
enum DocoapStatus docoap_client_poll_transmit(struct DocoapClient *client,
                                              uint8_t *out,
                                              size_t cap,
                                              size_t *written);

/**
 * Feeds a datagram received from the server.
 *
 * # Safety
 * `client` must be valid; `data` must hold `len` bytes.
 */
enum DocoapStatus docoap_client_handle_datagram(struct DocoapClient *client,
                                                const uint8_t *data,
                                                size_t len,
                                                uint64_t now_ms);

/**
 * Stores the next protocol deadline in `*deadline_ms`, or returns
 * `DOCOAP_STATUS_EMPTY` when nothing is pending.
 *
 * # Safety
 * `client` and `deadline_ms` must be valid.
 */
enum DocoapStatus docoap_client_poll_timeout(const struct DocoapClient *client,
                                             uint64_t *deadline_ms);

/**
 * # Safety
 * `client` must be valid.
 */
enum DocoapStatus docoap_client_handle_timeout(struct DocoapClient *client, uint64_t now_ms);

/**
 * Takes the next finished query. On `DOCOAP_OUTCOME_RESOLVED` the DNS
 * response (wire format, restored TTLs) is copied to `out`; on failure
 * the reason is available from [`docoap_last_error`].
 *
 * # Safety
 * All pointers must be valid; `out` must hold `cap` bytes.
 */
enum DocoapStatus docoap_client_poll_result(struct DocoapClient *client,
                                            uint64_t *id,
                                            enum DocoapOutcome *outcome,
                                            uint8_t *out,
                                            size_t cap,
                                            size_t *written);

/**
 * Creates a server answering every A/AAAA question with `records`
 * synthetic addresses and a fixed TTL. A non-NULL `oscore` context is
 * taken over and then required on every request.
 *
 * # Safety
 * `oscore` must be NULL or a context that is not used afterwards.
 */
struct DocoapServer *docoap_server_new(size_t records,
                                       uint32_t ttl,
                                       enum DocoapScheme scheme,
                                       uint64_t seed,
                                       struct DocoapOscoreContext *oscore);

/**
 * # Safety
 * `server` must come from [`docoap_server_new`] and not be used afterwards.
 */
void docoap_server_free(struct DocoapServer *server);

/**
 * # Safety
 * `server` must be valid; `data` must hold `len` bytes.
 */
enum DocoapStatus docoap_server_handle_datagram(struct DocoapServer *server,
                                                uint64_t peer,
                                                const uint8_t *data,
                                                size_t len,
                                                uint64_t now_ms);

/**
 * Next outgoing datagram and its destination peer, or `DOCOAP_STATUS_EMPTY`.
 *
 * # Safety
 * All pointers must be valid; `out` must hold `cap` bytes.
 */
enum DocoapStatus docoap_server_poll_transmit(struct DocoapServer *server,
                                              uint64_t *peer,
                                              uint8_t *out,
                                              size_t cap,
                                              size_t *written);

/**
 * Derives an OSCORE context from the master secret, salt and IDs.
 * Returns NULL on invalid input.
 *
 * # Safety
 * Each pointer must hold the given number of bytes.
 */
struct DocoapOscoreContext *docoap_oscore_context_new(const uint8_t *secret,
                                                      size_t secret_len,
                                                      const uint8_t *salt,
                                                      size_t salt_len,
                                                      const uint8_t *sender_id,
                                                      size_t sender_len,
                                                      const uint8_t *recipient_id,
                                                      size_t recipient_len);

/**
 * # Safety
 * `ctx` must come from [`docoap_oscore_context_new`] and not be used afterwards.
 */
void docoap_oscore_context_free(struct DocoapOscoreContext *ctx);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOCOAP_H */
