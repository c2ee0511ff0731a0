/* Quarter-plane walk counting core.
 *
 * Layers are stored as packed columns: column i of layer n holds the exact
 * counts c(i, j) for j = 0..n in fixed-width bit slots, so the whole column
 * is one multi-limb natural number  sum_j c(i,j) * 2^(j*B).  B is a multiple
 * of the limb size, which turns the j -> j +/- 1 moves of a step into limb
 * offsets instead of materialised shifts.  Truncation at j < 0 falls out of
 * dropping slot 0 under a y-negative move; truncation at i < 0 falls out of
 * the column index range.
 *
 * A destination column is produced in one pass: for each limb, the limbs of
 * all contributing source columns (at their step offsets) are accumulated in
 * 128-bit arithmetic with a single carry chain.  The limb range is split
 * into segments on which the active source set is constant.
 *
 * Layer totals are maintained by a running recurrence instead of summing the
 * table: total(n+1) = W*total(n) - wx*yaxis(n) - wy*xaxis(n) + wsw*origin(n),
 * where the subtracted terms are the walks that would step off an axis and
 * the corner term repairs the double subtraction.
 */

#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <gmp.h>
#include <pthread.h>
#include <stdlib.h>
#include <string.h>

#define MAX_STEPS 8

typedef struct {
    int dx, dy;
    mp_limb_t w;
} step_t;

typedef struct {
    const mp_limb_t *p; /* pre-offset source pointer: read p[l] at dst limb l */
    mp_limb_t w;
    long lo, hi;        /* valid dst limb range */
} src_t;

typedef struct {
    const mp_limb_t *cur;
    mp_limb_t *nxt;
    long colcap, slot_limbs, src_cols, src_limbs, dst_limbs;
    long i0, i1;
    const step_t *steps;
    int k;
    int use_nt; /* bypass-cache stores for large layers */
    int overflow;
} job_t;

#define LIMB_BITS (sizeof(mp_limb_t) * 8)

#if defined(__x86_64__) && defined(__SSE2__)
#include <emmintrin.h>
#define HAVE_NT_STORE 1
static inline void nt_store(mp_limb_t *p, mp_limb_t v)
{
    _mm_stream_si64((long long *)p, (long long)v);
}
#else
#define HAVE_NT_STORE 0
static inline void nt_store(mp_limb_t *p, mp_limb_t v) { *p = v; }
#endif

static inline void plain_store(mp_limb_t *p, mp_limb_t v) { *p = v; }

/* One pass per destination limb: 128-bit sum of all active sources plus the
 * running inter-limb carry.  Emitted either through the cache or around it;
 * destination columns of large layers are only read back one layer later,
 * by which point they would have been evicted anyway. */
#define SUM_LOOP(STORE, TERM)                                                 \
    for (long l = s0; l < s1; l++) {                                          \
        unsigned __int128 acc = carry;                                        \
        for (int a = 0; a < na; a++)                                          \
            acc += (TERM);                                                    \
        STORE(&dst[l], (mp_limb_t)acc);                                       \
        carry = acc >> LIMB_BITS;                                             \
    }

static void *run_job(void *arg)
{
    job_t *j = (job_t *)arg;
    long SL = j->slot_limbs;
    for (long i = j->i0; i < j->i1; i++) {
        mp_limb_t *dst = j->nxt + i * j->colcap;
        src_t srcs[MAX_STEPS];
        long cuts[2 * MAX_STEPS + 2];
        int ns = 0, nc = 0;
        int weighted = 0;
        for (int s = 0; s < j->k; s++) {
            long col = i - j->steps[s].dx;
            if (col < 0 || col >= j->src_cols)
                continue;
            long off = (long)j->steps[s].dy * SL;
            long lo = off > 0 ? off : 0;
            long hi = off + j->src_limbs;
            if (hi > lo) {
                srcs[ns].p = j->cur + col * j->colcap - off;
                srcs[ns].w = j->steps[s].w;
                srcs[ns].lo = lo;
                srcs[ns].hi = hi;
                if (srcs[ns].w != 1)
                    weighted = 1;
                cuts[nc++] = lo;
                cuts[nc++] = hi;
                ns++;
            }
        }
        cuts[nc++] = 0;
        cuts[nc++] = j->dst_limbs;
        /* insertion sort of the tiny cut list */
        for (int a = 1; a < nc; a++) {
            long v = cuts[a];
            int b = a - 1;
            while (b >= 0 && cuts[b] > v) {
                cuts[b + 1] = cuts[b];
                b--;
            }
            cuts[b + 1] = v;
        }
        unsigned __int128 carry = 0;
        for (int c = 0; c + 1 < nc; c++) {
            long s0 = cuts[c], s1 = cuts[c + 1];
            if (s1 <= s0 || s0 >= j->dst_limbs)
                continue;
            const mp_limb_t *act[MAX_STEPS];
            mp_limb_t actw[MAX_STEPS];
            int na = 0;
            for (int s = 0; s < ns; s++)
                if (srcs[s].lo <= s0 && s0 < srcs[s].hi) {
                    act[na] = srcs[s].p;
                    actw[na] = srcs[s].w;
                    na++;
                }
            if (j->use_nt) {
                if (weighted) {
                    SUM_LOOP(nt_store,
                             (unsigned __int128)actw[a] * act[a][l]);
                } else {
                    SUM_LOOP(nt_store, act[a][l]);
                }
            } else {
                if (weighted) {
                    SUM_LOOP(plain_store,
                             (unsigned __int128)actw[a] * act[a][l]);
                } else {
                    SUM_LOOP(plain_store, act[a][l]);
                }
            }
        }
        if (carry)
            j->overflow = 1; /* slot headroom was violated */
    }
#if HAVE_NT_STORE
    if (j->use_nt)
        _mm_sfence();
#endif
    return NULL;
}

/* Aggregates of one layer: xaxis = sum_i c(i,0), yaxis = sum_j c(0,j),
 * origin = c(0,0).  `cols` is the number of live columns (= live slots). */
static void layer_masses(const mp_limb_t *cur, long colcap, long slot_limbs,
                         long cols, mpz_t xaxis, mpz_t yaxis, mpz_t origin,
                         mpz_t tmp)
{
    mpz_set_ui(xaxis, 0);
    mpz_set_ui(yaxis, 0);
    for (long i = 0; i < cols; i++) {
        mpz_import(tmp, slot_limbs, -1, sizeof(mp_limb_t), 0, 0,
                   cur + i * colcap);
        mpz_add(xaxis, xaxis, tmp);
    }
    for (long j = 0; j < cols; j++) {
        mpz_import(tmp, slot_limbs, -1, sizeof(mp_limb_t), 0, 0,
                   cur + j * slot_limbs);
        mpz_add(yaxis, yaxis, tmp);
    }
    mpz_import(origin, slot_limbs, -1, sizeof(mp_limb_t), 0, 0, cur);
}

static PyObject *mpz_to_pylong(const mpz_t z)
{
    char *s = mpz_get_str(NULL, 16, z);
    PyObject *v = PyLong_FromString(s, NULL, 16);
    free(s);
    return v;
}

static PyObject *py_quarter_totals(PyObject *self, PyObject *args)
{
    PyObject *steps_obj;
    long n_max, slot_limbs, threads;
    if (!PyArg_ParseTuple(args, "Olll", &steps_obj, &n_max, &slot_limbs,
                          &threads))
        return NULL;
    if (!PyList_Check(steps_obj) || n_max < 0 || slot_limbs < 1) {
        PyErr_SetString(PyExc_ValueError, "bad arguments");
        return NULL;
    }
    Py_ssize_t k = PyList_Size(steps_obj);
    if (k < 1 || k > MAX_STEPS) {
        PyErr_SetString(PyExc_ValueError, "need 1..8 steps");
        return NULL;
    }
    step_t steps[MAX_STEPS];
    unsigned long W = 0, wx = 0, wy = 0, wsw = 0;
    for (Py_ssize_t s = 0; s < k; s++) {
        PyObject *t = PyList_GetItem(steps_obj, s);
        steps[s].dx = (int)PyLong_AsLong(PyTuple_GetItem(t, 0));
        steps[s].dy = (int)PyLong_AsLong(PyTuple_GetItem(t, 1));
        steps[s].w = (mp_limb_t)PyLong_AsUnsignedLong(PyTuple_GetItem(t, 2));
        if (PyErr_Occurred())
            return NULL;
        if (steps[s].dx < -1 || steps[s].dx > 1 || steps[s].dy < -1 ||
            steps[s].dy > 1 || (steps[s].dx == 0 && steps[s].dy == 0) ||
            steps[s].w < 1) {
            PyErr_SetString(PyExc_ValueError, "steps must be weighted small steps");
            return NULL;
        }
        W += steps[s].w;
        if (steps[s].dx < 0) wx += steps[s].w;
        if (steps[s].dy < 0) wy += steps[s].w;
        if (steps[s].dx < 0 && steps[s].dy < 0) wsw += steps[s].w;
    }
    if (threads < 1)
        threads = 1;
    if (threads > MAX_STEPS)
        threads = MAX_STEPS;

    long colcap = (n_max + 2) * slot_limbs;
    size_t bufsz = (size_t)(n_max + 1) * (size_t)colcap * sizeof(mp_limb_t);
    mp_limb_t *bufA = calloc(1, bufsz);
    mp_limb_t *bufB = calloc(1, bufsz);
    if (!bufA || !bufB) {
        free(bufA);
        free(bufB);
        return PyErr_NoMemory();
    }
    mpz_t *agg = malloc(4 * (n_max + 1) * sizeof(mpz_t));
    if (!agg) {
        free(bufA);
        free(bufB);
        return PyErr_NoMemory();
    }
    mpz_t *totals = agg, *xaxis = agg + (n_max + 1),
          *yaxis = agg + 2 * (n_max + 1), *origin = agg + 3 * (n_max + 1);
    for (long n = 0; n < 4 * (n_max + 1); n++)
        mpz_init(agg[n]);
    int overflow = 0;

    Py_BEGIN_ALLOW_THREADS
    {
        mp_limb_t *cur = bufA, *nxt = bufB;
        mpz_t tmp;
        mpz_init(tmp);
        cur[0] = 1;
        mpz_set_ui(totals[0], 1);
        for (long n = 1; n <= n_max && !overflow; n++) {
            long src_cols = n;
            layer_masses(cur, colcap, slot_limbs, src_cols,
                         xaxis[n - 1], yaxis[n - 1], origin[n - 1], tmp);
            mpz_mul_ui(totals[n], totals[n - 1], W);
            mpz_mul_ui(tmp, yaxis[n - 1], wx);
            mpz_sub(totals[n], totals[n], tmp);
            mpz_mul_ui(tmp, xaxis[n - 1], wy);
            mpz_sub(totals[n], totals[n], tmp);
            mpz_mul_ui(tmp, origin[n - 1], wsw);
            mpz_add(totals[n], totals[n], tmp);

            long m = n + 1;
            long T = threads < m ? threads : m;
            job_t jobs[MAX_STEPS];
            pthread_t tids[MAX_STEPS];
            long chunk = (m + T - 1) / T;
            int use_nt = HAVE_NT_STORE &&
                         (double)m * (n + 1) * slot_limbs * 8 > 8e6;
            for (long t = 0; t < T; t++) {
                long i0 = t * chunk;
                long i1 = i0 + chunk < m ? i0 + chunk : m;
                jobs[t] = (job_t){cur, nxt, colcap, slot_limbs, src_cols,
                                  n * slot_limbs, (n + 1) * slot_limbs,
                                  i0, i1, steps, (int)k, use_nt, 0};
            }
            for (long t = 1; t < T; t++)
                pthread_create(&tids[t], NULL, run_job, &jobs[t]);
            run_job(&jobs[0]);
            for (long t = 1; t < T; t++)
                pthread_join(tids[t], NULL);
            for (long t = 0; t < T; t++)
                if (jobs[t].overflow)
                    overflow = 1;
            mp_limb_t *sw = cur;
            cur = nxt;
            nxt = sw;
        }
        if (!overflow)
            layer_masses(cur, colcap, slot_limbs, n_max + 1,
                         xaxis[n_max], yaxis[n_max], origin[n_max], tmp);
        mpz_clear(tmp);
    }
    Py_END_ALLOW_THREADS

    free(bufA);
    free(bufB);
    PyObject *result = NULL;
    if (overflow) {
        PyErr_SetString(PyExc_OverflowError, "slot width too small");
    } else {
        PyObject *lists[4];
        for (int q = 0; q < 4; q++)
            lists[q] = PyList_New(n_max + 1);
        for (long n = 0; n <= n_max; n++) {
            PyList_SetItem(lists[0], n, mpz_to_pylong(totals[n]));
            PyList_SetItem(lists[1], n, mpz_to_pylong(origin[n]));
            PyList_SetItem(lists[2], n, mpz_to_pylong(xaxis[n]));
            PyList_SetItem(lists[3], n, mpz_to_pylong(yaxis[n]));
        }
        result = PyTuple_Pack(4, lists[0], lists[1], lists[2], lists[3]);
        for (int q = 0; q < 4; q++)
            Py_DECREF(lists[q]);
    }
    for (long n = 0; n < 4 * (n_max + 1); n++)
        mpz_clear(agg[n]);
    free(agg);
    return result;
}

static PyMethodDef fastwalk_methods[] = {
    {"quarter_totals", py_quarter_totals, METH_VARARGS,
     "quarter_totals(steps, n_max, slot_limbs, threads) -> "
     "(totals, origin, xaxis, yaxis)"},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef fastwalk_module = {
    PyModuleDef_HEAD_INIT, "_fastwalk",
    "GMP/limb-level packed-column walk counting.", -1, fastwalk_methods,
};

PyMODINIT_FUNC PyInit__fastwalk(void)
{
    return PyModule_Create(&fastwalk_module);
}
