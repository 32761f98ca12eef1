import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'project_actionnet.settings')
django.setup()
