#ifndef LAYERCUT_H
#define LAYERCUT_H

/* Generated by cbindgen from the layercut-ffi sources. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values 1 to 5 match the command line exit codes.
 */
typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_INVALID = 1,
  LC_STATUS_CONFIG = 2,
  LC_STATUS_IO = 3,
  LC_STATUS_GUIDANCE = 4,
  LC_STATUS_NON_FINITE = 5,
  LC_STATUS_NULL_POINTER = 6,
  LC_STATUS_BUFFER_TOO_SMALL = 7,
  LC_STATUS_PANIC = 8,
} LcStatus;

/**
 * Triangle mesh with optional colours and face labels.
 */
typedef struct LcMesh LcMesh;

/**
 * Joint rotations and blend shape coefficients.
 */
typedef struct LcPose LcPose;

/**
 * Skeleton, skinning weights and blend shapes.
 */
typedef struct LcRig LcRig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next failing
 * call on the same thread.
 */
const char *lc_last_error(void);

void lc_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lc_version(void);

/**
 * Reads an OBJ or PLY file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LcStatus lc_mesh_read(const char *path, struct LcMesh **out);

/**
 * Builds a mesh from `vertex_count` xyz triples and `face_count` index triples.
 *
 * # Safety
 * The arrays must hold `3 * vertex_count` and `3 * face_count` elements.
 */
enum LcStatus lc_mesh_from_arrays(const double *vertices,
                                  size_t vertex_count,
                                  const uint32_t *faces,
                                  size_t face_count,
                                  struct LcMesh **out);

/**
 * Writes the mesh; the extension picks PLY or OBJ.
 *
 * # Safety
 * `mesh` must come from this library and `path` be NUL-terminated.
 */
enum LcStatus lc_mesh_write(const struct LcMesh *mesh, const char *path);

/**
 * Vertex count, or 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or come from this library.
 */
size_t lc_mesh_vertex_count(const struct LcMesh *mesh);

/**
 * Face count, or 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or come from this library.
 */
size_t lc_mesh_face_count(const struct LcMesh *mesh);

/**
 * Copies xyz triples into `out`, which holds `capacity` doubles.
 *
 * # Safety
 * `out` must be writable for `capacity` elements.
 */
enum LcStatus lc_mesh_copy_vertices(const struct LcMesh *mesh, double *out, size_t capacity);

/**
 * Copies index triples into `out`, which holds `capacity` integers.
 *
 * # Safety
 * `out` must be writable for `capacity` elements.
 */
enum LcStatus lc_mesh_copy_faces(const struct LcMesh *mesh, uint32_t *out, size_t capacity);

/**
 * # Safety
 * `mesh` must be null or come from this library, and not be used afterwards.
 */
void lc_mesh_free(struct LcMesh *mesh);

/**
 * Node count of the regular grid at `resolution`.
 */
enum LcStatus lc_grid_node_count(uint32_t resolution, size_t *out);

/**
 * Node positions of the regular grid as xyz triples.
 *
 * # Safety
 * `out` must be writable for `capacity` elements.
 */
enum LcStatus lc_grid_nodes(uint32_t resolution, double *out, size_t capacity);

/**
 * Zero level set of per-node signed distances on the regular grid, without offsets.
 *
 * # Safety
 * `sdf` must hold `count` values, one per grid node.
 */
enum LcStatus lc_extract_surface(uint32_t resolution,
                                 const double *sdf,
                                 size_t count,
                                 struct LcMesh **out);

/**
 * Symmetric mean surface distance between two meshes.
 *
 * # Safety
 * Handles must come from this library.
 */
enum LcStatus lc_chamfer(const struct LcMesh *a,
                         const struct LcMesh *b,
                         size_t samples,
                         uint64_t seed,
                         double *out);

/**
 * Volumetric intersection over union on a `resolution`³ lattice.
 *
 * # Safety
 * Handles must come from this library.
 */
enum LcStatus lc_voxel_iou(const struct LcMesh *a,
                           const struct LcMesh *b,
                           size_t resolution,
                           double *out);

/**
 * Loads a rig description and the files it references.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum LcStatus lc_rig_load(const char *path, struct LcRig **out);

/**
 * # Safety
 * `rig` must be null or come from this library, and not be used afterwards.
 */
void lc_rig_free(struct LcRig *rig);

/**
 * Loads a pose file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum LcStatus lc_pose_load(const char *path, struct LcPose **out);

/**
 * The rest pose of `rig`.
 *
 * # Safety
 * `rig` must come from this library and `out` be valid.
 */
enum LcStatus lc_pose_zero(const struct LcRig *rig, struct LcPose **out);

/**
 * # Safety
 * `pose` must be null or come from this library, and not be used afterwards.
 */
void lc_pose_free(struct LcPose *pose);

/**
 * Skins a canonical mesh into `pose`.
 *
 * # Safety
 * Handles must come from this library and `out` be valid.
 */
enum LcStatus lc_lbs_forward(const struct LcMesh *mesh,
                             const struct LcRig *rig,
                             const struct LcPose *pose,
                             struct LcMesh **out);

/**
 * Votes the masks of a view manifest onto the scan's faces. Writes one byte per face into
 * `labels`: 0 human, 1 object.
 *
 * # Safety
 * `labels` must be writable for `capacity` bytes.
 */
enum LcStatus lc_lift_labels(const struct LcMesh *scan,
                             const char *manifest,
                             uint32_t min_votes,
                             uint8_t *labels,
                             size_t capacity);

/**
 * Pushes the human layer under the object layer with default settings and the given
 * displacement weight. `penetrating` receives the remaining penetrating vertex count.
 *
 * # Safety
 * Handles must come from this library; output pointers must be valid.
 */
enum LcStatus lc_refine(const struct LcMesh *human,
                        const struct LcMesh *object,
                        double lambda_dis,
                        struct LcMesh **out,
                        size_t *penetrating);

/**
 * Runs the synthetic demo into `out_dir`. `config` may be null for the built-in settings;
 * otherwise it is layered over them. `passed` receives 1 when every threshold held.
 *
 * # Safety
 * Strings must be NUL-terminated; `passed` must be valid.
 */
enum LcStatus lc_demo_synthetic(const char *config, const char *out_dir, int32_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAYERCUT_H */
