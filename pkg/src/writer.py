import logging
import os
import tempfile
from contextlib import contextmanager

output_dir = './output'

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def setup_logging(level='INFO', log_file=None):
    """
    Configure the root logger once per process.
    """
    handlers = [logging.StreamHandler()]
    if log_file is not None:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


@contextmanager
def atomic_path(path):
    """
    Yield a temporary path next to `path`; move it over `path` only if the
    block finishes without raising.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(path) + '.', suffix='.tmp')
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def output_to_file(filename, text, mode='w', directory=None):
    """
    Write the message to the specified file.

    Writes (mode 'w') go through a temp file and a rename so an interrupted
    run never leaves a half-written artifact. Appends are written in place.
    """
    path = os.path.join(directory or output_dir, filename)
    if mode == 'a':
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'a', encoding='utf-8', newline='\n') as file:
            file.write(text)
        return path

    with atomic_path(path) as tmp:
        with open(tmp, 'w', encoding='utf-8', newline='\n') as file:
            file.write(text)
    return path
