#ifndef EIT_H
#define EIT_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every API call.
 */
typedef enum EitStatus {
  /**
   * Success.
   */
  EIT_STATUS_OK = 0,
  /**
   * A pointer argument was null or a scalar argument out of range.
   */
  EIT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * File could not be read, written, or parsed.
   */
  EIT_STATUS_IO = 2,
  /**
   * The computation itself failed (singular system, dimension mismatch, ...).
   */
  EIT_STATUS_COMPUTE = 3,
  /**
   * A panic was caught at the FFI boundary; state may be inconsistent.
   */
  EIT_STATUS_INTERNAL = 4,
} EitStatus;

/**
 * Opaque PCA basis.
 */
typedef struct EitBasis EitBasis;

/**
 * Opaque measurement set.
 */
typedef struct EitData EitData;

/**
 * Opaque mesh + electrode layout.
 */
typedef struct EitMesh EitMesh;

/**
 * Opaque inversion result.
 */
typedef struct EitSolution EitSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message for this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes, excluding
 * the terminator. Passing a null `buf` just queries the length.
 */
size_t eit_last_error_message(char *buf, size_t len);

/**
 * Build a disc mesh with `electrodes` equispaced boundary electrodes.
 *
 * `half_width` is the electrode half-arc in radians, `impedance` the contact
 * impedance shared by all electrodes.
 */
enum EitStatus eit_mesh_build(double radius,
                              size_t electrodes,
                              double half_width,
                              double impedance,
                              size_t target_elements,
                              struct EitMesh **out);

/**
 * Load a mesh saved by the CLI `mesh` command.
 */
enum EitStatus eit_mesh_load(const char *path, struct EitMesh **out);

/**
 * Number of triangular elements in the mesh; 0 if `mesh` is null.
 */
size_t eit_mesh_num_elements(const struct EitMesh *mesh);

void eit_mesh_free(struct EitMesh *mesh);

/**
 * Load measurement data (CSV written by the CLI `simulate` command) using
 * the reference 16-electrode base drive with `num_rotations` rotations.
 */
enum EitStatus eit_data_load(const char *path, size_t num_rotations, struct EitData **out);

void eit_data_free(struct EitData *data);

/**
 * Load a PCA basis saved by the CLI `pca-build` command.
 */
enum EitStatus eit_basis_load(const char *path, struct EitBasis **out);

/**
 * Build a PCA basis from `realizations` random conductivity fields on `mesh`,
 * keeping components up to the cumulative `energy` fraction (0 < energy ≤ 1).
 */
enum EitStatus eit_basis_build(const struct EitMesh *mesh,
                               size_t realizations,
                               double energy,
                               uint64_t seed,
                               struct EitBasis **out);

/**
 * Number of retained PCA components; 0 if `basis` is null.
 */
size_t eit_basis_num_components(const struct EitBasis *basis);

void eit_basis_free(struct EitBasis *basis);

/**
 * Evaluate the measurement-misfit objective for the per-element conductivity
 * in `sigma` (length `sigma_len`, which must equal the element count).
 */
enum EitStatus eit_objective_value(const struct EitMesh *mesh,
                                   const struct EitData *data,
                                   const double *sigma,
                                   size_t sigma_len,
                                   double *out_value);

/**
 * Run the inversion driver. `fine_only != 0` disables the coarse scale;
 * `n_max` is the maximum number of coarse regions (ignored when fine-only).
 */
enum EitStatus eit_invert(const struct EitMesh *mesh,
                          const struct EitBasis *basis,
                          const struct EitData *data,
                          int32_t fine_only,
                          size_t n_max,
                          size_t max_iterations,
                          struct EitSolution **out);

/**
 * Copy the recovered fine-scale conductivity into `buf` (length `len` must
 * equal the element count).
 */
enum EitStatus eit_solution_fine_field(const struct EitSolution *solution, double *buf, size_t len);

/**
 * Final objective value of the fine-scale iterate.
 */
double eit_solution_objective(const struct EitSolution *solution);

/**
 * Total forward-solve-equivalent objective evaluations consumed.
 */
size_t eit_solution_evaluations(const struct EitSolution *solution);

void eit_solution_free(struct EitSolution *solution);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EIT_H */
