import os

# Keep BLAS single-threaded so worker-pool tests don't oversubscribe the
# machine; must happen before numpy is imported anywhere.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
