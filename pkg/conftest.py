import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'detlab.settings')
django.setup()
