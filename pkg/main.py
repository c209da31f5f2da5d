import os

from app import app
from constants import DEFAULTS, ENV

if __name__ == '__main__':
    app.run(host='0.0.0.0', port=int(os.environ.get(ENV['port'], DEFAULTS['port'])), debug=True)
