#ifndef BRIDGEGRID_H
#define BRIDGEGRID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BgAllreduceVariant {
  BgAllreduceTree = 0,
  BgAllreduceRing = 1,
} BgAllreduceVariant;

typedef enum BgReduceOp {
  BgReduceSum = 0,
  BgReduceMin = 1,
  BgReduceMax = 2,
} BgReduceOp;

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum BgStatus {
  BgOk = 0,
  BgErrInvalidArgument = 1,
  BgErrBindFailed = 2,
  BgErrContactFile = 3,
  BgErrNoServerFound = 4,
  BgErrDuplicateRank = 5,
  BgErrTokenMismatch = 6,
  BgErrSessionClosed = 7,
  BgErrKeyNotVisible = 8,
  BgErrUnknownProcess = 9,
  BgErrPeerTerminated = 10,
  BgErrTimeout = 11,
  BgErrNotAMember = 12,
  BgErrMissingEndpoint = 13,
  BgErrPeerUnreachable = 14,
  BgErrLengthMismatch = 15,
  BgErrConcurrentCollective = 16,
  BgErrProtocol = 17,
  BgErrIo = 18,
  BgErrInternal = 19,
} BgStatus;

/**
 * Opaque communicator handle.
 */
typedef struct BgCommunicator BgCommunicator;

/**
 * Opaque server handle.
 */
typedef struct BgServer BgServer;

/**
 * Opaque session handle; owns a lazily bound transport for collectives.
 */
typedef struct BgSession BgSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *bg_last_error_message(void);

/**
 * Start a rendezvous server bound to `bind_addr` (for example
 * "127.0.0.1:0"), writing its contact file under `contact_dir`.
 */
enum BgStatus bg_server_start(const char *bind_addr,
                              const char *contact_dir,
                              struct BgServer **out_server);

/**
 * Path of the server's contact file; valid while the handle lives.
 */
const char *bg_server_contact_path(const struct BgServer *server);

/**
 * `host:port` the server listens on; valid while the handle lives.
 */
const char *bg_server_addr(const struct BgServer *server);

/**
 * Authentication token; valid while the handle lives.
 */
const char *bg_server_token(const struct BgServer *server);

/**
 * Shut the server down and free the handle.
 */
void bg_server_free(struct BgServer *server);

/**
 * Attach to a server as `(namespace, rank)` of a namespace sized `size`.
 * `server_addr` and `token` may be NULL to fall back to the contact-file
 * search under `contact_dir` (itself optional).
 */
enum BgStatus bg_attach(const char *namespace_,
                        uint32_t rank,
                        uint32_t size,
                        const char *server_addr,
                        const char *token,
                        const char *contact_dir,
                        struct BgSession **out_session);

/**
 * Store a key-value pair; peers see it after the next completed fence.
 */
enum BgStatus bg_put(struct BgSession *session,
                     const char *key,
                     const uint8_t *value,
                     uintptr_t value_len);

/**
 * Block until every rank of the namespace has fenced; commits all puts.
 */
enum BgStatus bg_fence(struct BgSession *session);

/**
 * Fetch a committed value into a freshly allocated buffer; release it
 * with `bg_buffer_free`.
 */
enum BgStatus bg_get(struct BgSession *session,
                     uint32_t owner_rank,
                     const char *key,
                     uint8_t **out_value,
                     uintptr_t *out_len);

/**
 * Free a buffer returned by `bg_get`.
 */
void bg_buffer_free(uint8_t *ptr, uintptr_t len);

/**
 * Bind this session's collective transport and publish its endpoint
 * under the key `"endpoint"`. Call before the fence that precedes
 * `bg_connect`.
 */
enum BgStatus bg_endpoint_publish(struct BgSession *session);

/**
 * Collective group formation over `ranks` of this session's namespace
 * (NULL means all ranks). Completes when every participant has called
 * with the same participant set and `tag`; `timeout_ms` of 0 disables
 * the timeout. Yields a communicator over the published endpoints.
 */
enum BgStatus bg_connect(struct BgSession *session,
                         const uint32_t *ranks,
                         uintptr_t n_ranks,
                         const char *tag,
                         uint64_t timeout_ms,
                         struct BgCommunicator **out_comm);

uint32_t bg_comm_rank(const struct BgCommunicator *comm);

uint32_t bg_comm_size(const struct BgCommunicator *comm);

/**
 * Block until every group member has entered.
 */
enum BgStatus bg_barrier(struct BgCommunicator *comm);

/**
 * In-place allreduce over `data[0..len]`; every member must pass the
 * same `len`, `op`, and `variant`.
 */
enum BgStatus bg_allreduce(struct BgCommunicator *comm,
                           double *data,
                           uintptr_t len,
                           enum BgReduceOp op,
                           enum BgAllreduceVariant variant);

/**
 * Collective group dissolution; completes after every member calls it
 * and all collectives on the group have finished.
 */
enum BgStatus bg_disconnect(struct BgSession *session, struct BgCommunicator *comm);

void bg_comm_free(struct BgCommunicator *comm);

/**
 * Deregister from the server; peers blocked on this process observe
 * `PEER_TERMINATED`.
 */
enum BgStatus bg_session_finalize(struct BgSession *session);

void bg_session_free(struct BgSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRIDGEGRID_H */
