# app_aqa/apps.py
from django.apps import AppConfig

class AppAqaConfig(AppConfig):
    name = "app_aqa"
    verbose_name = "Action quality assessment"
